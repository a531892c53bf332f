use dualimit::data::{sample_trajectories, CountOptions, EmpiricalDistribution, Source};
use dualimit::mdp::{build_gridworld, policy_return, TabularPolicy};
use dualimit::offrl::{extract_offline_rl_policy, solve_offline_rl, OffRlConfig};
use dualimit::oracle::{primal_mirror_ascent, MirrorAscentConfig};
use dualimit::pipeline::GridExperiment;
use dualimit::policy::occupancy_divergence;

fn grid_setup() -> (dualimit::mdp::TabularMdp, dualimit::data::Dataset) {
    let mdp = build_gridworld(&GridExperiment::default().grid).unwrap();
    let data = sample_trajectories(
        &mdp,
        &TabularPolicy::uniform(64, 4),
        200,
        100,
        11,
        Source::Supplementary,
    )
    .unwrap();
    (mdp, data)
}

#[test]
fn grid_policy_matches_regularized_optimum() {
    let (mdp, data) = grid_setup();
    let rho_o = EmpiricalDistribution::from_dataset(&data, None, 64, 4, CountOptions::default()).unwrap();
    assert!(rho_o.support().iter().all(|&m| m), "data must cover every pair");
    let sol = solve_offline_rl(&data, Some(&mdp), 64, 4, &OffRlConfig::default()).unwrap();
    let policy = extract_offline_rl_policy(&data, &sol.duals.y()).unwrap();
    let oracle = primal_mirror_ascent(&sol.problem, &MirrorAscentConfig::default()).unwrap();
    let ours = policy_return(&mdp, &policy).unwrap();
    let best = policy_return(&mdp, &oracle.pi_star).unwrap();
    assert!(
        (ours - best).abs() <= 0.05 * best.abs(),
        "return {ours} vs oracle {best}"
    );
}

#[test]
fn stronger_regularization_stays_closer_to_data() {
    let (mdp, data) = grid_setup();
    let rho_o = EmpiricalDistribution::from_dataset(&data, None, 64, 4, CountOptions::default()).unwrap();
    let kls: Vec<f64> = [0.5, 1.0, 2.0, 5.0]
        .iter()
        .map(|&alpha| {
            let cfg = OffRlConfig {
                alpha,
                ..Default::default()
            };
            let sol = solve_offline_rl(&data, Some(&mdp), 64, 4, &cfg).unwrap();
            let policy = extract_offline_rl_policy(&data, &sol.duals.y()).unwrap();
            occupancy_divergence(&mdp, &policy, &rho_o).unwrap()
        })
        .collect();
    assert!(kls.windows(2).all(|w| w[1] <= w[0]), "{kls:?}");
}
