use dualimit::finetune::{run_gail, GailDiscriminator, RETURN_METRIC};
use dualimit::mdp::TabularPolicy;
use dualimit::pipeline::{grid_experiment_data, pretrain_tabular, GridExperiment, OfflineConfig};

#[test]
fn gail_from_scratch_converges_on_the_grid() {
    let exp = GridExperiment::default();
    let data = grid_experiment_data(&exp).unwrap();
    let expert = data.expert_return().unwrap();
    let run = run_gail(
        &data.mdp,
        &TabularPolicy::uniform(64, 4),
        GailDiscriminator::random(64, 4, exp.seed),
        &data.expert,
        &exp.gail_config(),
    )
    .unwrap();
    let (episodes, last) = *run.curve.series(RETURN_METRIC).last().unwrap();
    assert_eq!(episodes, 200);
    assert!(last >= 0.9 * expert, "final return {last} vs expert {expert}");
}

#[test]
fn stitched_start_keeps_the_pretrained_return() {
    let exp = GridExperiment::default();
    let data = grid_experiment_data(&exp).unwrap();
    let art = pretrain_tabular(&data.union, 64, 4, &OfflineConfig::default()).unwrap();
    let stitched = GailDiscriminator::from_stitched(&art.stitched().unwrap(), 64, 4).unwrap();
    let mut cfg = exp.gail_config();
    cfg.episodes = 20;
    let run = run_gail(&data.mdp, &art.policy, stitched, &data.expert, &cfg).unwrap();
    let series = run.curve.series(RETURN_METRIC);
    let start = series[0].1;
    assert!(series.iter().all(|&(_, v)| v >= 0.95 * start), "{series:?}");
}
