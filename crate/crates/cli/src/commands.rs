//! Subcommand implementations. Every command writes its resolved config
//! into the output directory before doing any work.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use dualimit::data::{read_jsonl, write_jsonl, CountOptions, EmpiricalDistribution, Source};
use dualimit::finetune::{run_gail, DiscInit, GailDiscriminator, LearningCurve};
use dualimit::mdp::{bellman_flow_residual, policy_return, TabularMdp, GRID_ACTIONS};
use dualimit::offrl::{extract_offline_rl_policy, solve_offline_rl};
use dualimit::oracle::{
    duality_gap, generate_fixture, primal_brute_force, shipped_fixtures, Fixture, FIXTURE_ALPHAS, FIXTURE_COUNT,
};
use dualimit::pipeline::{grid_experiment_data, pretrain_tabular};
use dualimit::policy::{occupancy_divergence, PolicyArtifact};
use dualimit::reward::DensityDiscriminator;
use dualimit::ssp::{kkt_residual, optimal_occupancy, solve_ssp, DualVariables, SspConfig};
use dualimit::stitch::{stitch_discriminator, RatioModel, StitchedDiscriminator};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::experiments::{compare_with_scratch, first_reaching, mean_curve, unlearning};
use crate::report::{line_plot, Series};
use crate::NumericalFailure;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the grid world and sample expert and supplementary data.
    GenData,
    /// Discriminator, auxiliary reward, saddle point and policy from a union dataset.
    Pretrain(PretrainArgs),
    /// Assemble the finetuning discriminator from pretraining artifacts.
    Stitch(StitchArgs),
    /// Adversarial finetuning from a policy artifact.
    Finetune(FinetuneArgs),
    /// Duality, optimality and flow checks on the fixture suite.
    OracleCheck(OracleArgs),
    /// Regularized offline RL on a reward-labeled dataset.
    Offrl(OffRlArgs),
    /// Return and expert divergence of a policy.
    Eval(EvalArgs),
    /// SVG plot of one or more learning curves.
    Report(ReportArgs),
    /// Retention of the pretrained return under stitched and random discriminators.
    Unlearning(JobsArgs),
    /// Stitched finetuning against GAIL from scratch over several data seeds.
    Compare(CompareArgs),
    /// Regenerate the fixture suite.
    GenFixtures,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Union dataset (JSONL) with expert transitions tagged.
    #[arg(long)]
    pub data: PathBuf,
    /// MDP for sizes and evaluation; sizes come from the config otherwise.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    #[arg(long)]
    pub discriminator: PathBuf,
    #[arg(long)]
    pub duals: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiscInitArg {
    Stitched,
    Random,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    /// Expert dataset (JSONL).
    #[arg(long)]
    pub expert: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long, value_enum)]
    pub disc_init: DiscInitArg,
    /// Stitched discriminator, required with `--disc-init stitched`.
    #[arg(long)]
    pub stitched: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Directory of fixture JSON files; the bundled suite otherwise.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OffRlArgs {
    /// Reward-labeled dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// True dynamics; the maximum-likelihood model of the data otherwise.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    /// Expert dataset for the occupancy divergence.
    #[arg(long)]
    pub expert: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Curve CSV files (episodes,metric,value).
    #[arg(long = "curve", required = true)]
    pub curves: Vec<PathBuf>,
    #[arg(long, default_value = "return")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct JobsArgs {
    /// Parallel seeded runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Data and finetuning seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Normalized return the arms race to.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Alpha and duals of one pretraining run, the ratio half of the stitch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualArtifact {
    pub alpha: f64,
    pub duals: DualVariables,
}

fn read_json<T: DeserializeOwned>(path: &Path, flag: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("--{flag}: cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("--{flag}: malformed {}", path.display()))
}

/// JSON number, or its text for infinities that JSON cannot hold.
fn number(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_data(path: &Path, flag: &str) -> Result<dualimit::data::Dataset> {
    if !path.exists() {
        bail!("--{flag}: dataset {} does not exist", path.display());
    }
    read_jsonl(path).with_context(|| format!("--{flag}: reading {}", path.display()))
}

pub fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_snapshot(out)?;
    match command {
        Command::GenData => gen_data(cfg, out),
        Command::Pretrain(args) => pretrain(args, cfg, out),
        Command::Stitch(args) => stitch(args, out),
        Command::Finetune(args) => finetune(args, cfg, out),
        Command::OracleCheck(args) => oracle_check(args, out),
        Command::Offrl(args) => offrl(args, cfg, out),
        Command::Eval(args) => eval(args, out),
        Command::Report(args) => report(args, out),
        Command::Unlearning(args) => unlearning_cmd(args, cfg, out),
        Command::Compare(args) => compare(args, cfg, out),
        Command::GenFixtures => gen_fixtures(out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = grid_experiment_data(&cfg.data)?;
    write_json(out, "mdp.json", &data.mdp)?;
    write_json(out, "expert_policy.json", &PolicyArtifact::tabular(&data.expert_policy))?;
    write_jsonl(&data.expert, &out.join("expert.jsonl"))?;
    write_jsonl(&data.supplementary, &out.join("supplementary.jsonl"))?;
    write_jsonl(&data.union, &out.join("union.jsonl"))?;
    let summary = json!({
        "expert_return": data.expert_return()?,
        "expert_transitions": data.expert.len(),
        "supplementary_transitions": data.supplementary.len(),
    });
    write_json(out, "summary.json", &summary)?;
    println!("wrote {} union transitions to {}", data.union.len(), out.display());
    Ok(())
}

fn pretrain(args: &PretrainArgs, cfg: &RunConfig, out: &Path) -> Result<()> {
    let union = read_data(&args.data, "data")?;
    let mdp: Option<TabularMdp> = args.mdp.as_deref().map(|p| read_json(p, "mdp")).transpose()?;
    let (n_s, n_a) = mdp
        .as_ref()
        .map_or((cfg.n_states(), GRID_ACTIONS), |m| (m.n_states(), m.n_actions()));
    let art = pretrain_tabular(&union, n_s, n_a, &cfg.offline)?;
    write_json(out, "discriminator.json", &art.discriminator)?;
    write_json(
        out,
        "duals.json",
        &DualArtifact {
            alpha: art.reward.alpha(),
            duals: art.duals.clone(),
        },
    )?;
    write_json(out, "policy.json", &PolicyArtifact::tabular(&art.policy))?;
    write_json(out, "diagnostics.json", &art.diagnostics)?;
    let mut summary = json!({
        "converged": art.diagnostics.converged,
        "steps": art.diagnostics.steps_taken,
    });
    if let Some(mdp) = &mdp {
        summary["policy_return"] = json!(policy_return(mdp, &art.policy)?);
    }
    write_json(out, "summary.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn stitch(args: &StitchArgs, out: &Path) -> Result<()> {
    let start = Instant::now();
    let d: DensityDiscriminator = read_json(&args.discriminator, "discriminator")?;
    let duals: DualArtifact = read_json(&args.duals, "duals")?;
    let stitched = stitch_discriminator(d, RatioModel::Table { y: duals.duals.y() }, duals.alpha)?;
    write_json(out, "stitched.json", &stitched)?;
    println!(
        "stitched discriminator written in {:.3} ms",
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn finetune(args: &FinetuneArgs, cfg: &RunConfig, out: &Path) -> Result<()> {
    let mdp: TabularMdp = read_json(&args.mdp, "mdp")?;
    let expert = read_data(&args.expert, "expert")?;
    let artifact: PolicyArtifact = read_json(&args.policy, "policy")?;
    let policy = artifact.to_tabular(mdp.n_states())?;
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let (disc, init) = match args.disc_init {
        DiscInitArg::Stitched => {
            let Some(path) = &args.stitched else {
                bail!("--stitched is required with --disc-init stitched");
            };
            let stitched: StitchedDiscriminator = read_json(path, "stitched")?;
            (
                GailDiscriminator::from_stitched(&stitched, n_s, n_a)?,
                DiscInit::Stitched,
            )
        }
        DiscInitArg::Random => (GailDiscriminator::random(n_s, n_a, cfg.seed), DiscInit::Random),
    };
    let mut gail = cfg.gail.clone();
    gail.disc_init = init;
    let run = run_gail(&mdp, &policy, disc, &expert, &gail)?;
    run.curve.write_csv(&out.join("curve.csv"))?;
    write_json(out, "policy.json", &PolicyArtifact::tabular(&run.policy.probs()))?;
    write_json(out, "discriminator.json", &run.discriminator)?;
    let summary = json!({
        "env_steps": run.env_steps,
        "initial_return": policy_return(&mdp, &policy)?,
        "final_return": policy_return(&mdp, &run.policy.probs())?,
    });
    write_json(out, "summary.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleRow {
    fixture: String,
    alpha: f64,
    undiscounted: bool,
    gap: f64,
    kkt: f64,
    flow: f64,
    mass: f64,
}

fn load_fixtures(dir: Option<&Path>) -> Result<Vec<Fixture>> {
    let Some(dir) = dir else {
        return Ok(shipped_fixtures()?);
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("--fixtures: cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!("--fixtures: no JSON files in {}", dir.display());
    }
    paths.iter().map(|p| read_json(p, "fixtures")).collect()
}

fn oracle_check(args: &OracleArgs, out: &Path) -> Result<()> {
    let fixtures = load_fixtures(args.fixtures.as_deref())?;
    let mut rows = Vec::new();
    for fixture in &fixtures {
        for undiscounted in [false, true] {
            for alpha in FIXTURE_ALPHAS {
                let problem = fixture.problem(alpha, undiscounted)?;
                let oracle = primal_brute_force(&problem, 1e-9)?;
                let mut ssp = SspConfig::exact();
                ssp.undiscounted = undiscounted;
                let (duals, _) = solve_ssp(&problem, &ssp)?;
                let rho = optimal_occupancy(&duals, &problem);
                rows.push(OracleRow {
                    fixture: fixture.name.clone(),
                    alpha,
                    undiscounted,
                    gap: duality_gap(&oracle, &duals.nu, duals.lambda, &problem)?,
                    kkt: kkt_residual(&duals, &problem, ssp.y_clip)?,
                    flow: bellman_flow_residual(problem.mdp(), &rho)?
                        .iter()
                        .map(|x| x.abs())
                        .sum(),
                    mass: rho.sum(),
                });
            }
        }
    }
    write_json(out, "oracle_report.json", &rows)?;
    let failed: Vec<&OracleRow> = rows
        .iter()
        .filter(|r| {
            !(-1e-9..=1e-3).contains(&r.gap)
                || r.kkt > 1e-4
                || r.flow > 1e-3
                || (r.undiscounted && (r.mass - 1.0).abs() > 1e-3)
        })
        .collect();
    let worst_gap = rows.iter().map(|r| r.gap.abs()).fold(0.0, f64::max);
    println!(
        "{} problems, {} failing, worst |gap| {worst_gap:.3e}",
        rows.len(),
        failed.len()
    );
    if let Some(r) = failed.first() {
        return Err(NumericalFailure(format!(
            "{} alpha={} undiscounted={}: gap {:.3e}, kkt {:.3e}, flow {:.3e}",
            r.fixture, r.alpha, r.undiscounted, r.gap, r.kkt, r.flow
        ))
        .into());
    }
    Ok(())
}

fn offrl(args: &OffRlArgs, cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = read_data(&args.data, "data")?;
    let mdp: Option<TabularMdp> = args.mdp.as_deref().map(|p| read_json(p, "mdp")).transpose()?;
    let (n_s, n_a) = mdp
        .as_ref()
        .map_or((cfg.n_states(), GRID_ACTIONS), |m| (m.n_states(), m.n_actions()));
    let sol = solve_offline_rl(&data, mdp.as_ref(), n_s, n_a, &cfg.offrl)?;
    let policy = extract_offline_rl_policy(&data, &sol.duals.y())?;
    write_json(out, "policy.json", &PolicyArtifact::tabular(&policy))?;
    write_json(
        out,
        "duals.json",
        &DualArtifact {
            alpha: cfg.offrl.alpha,
            duals: sol.duals.clone(),
        },
    )?;
    let rho_o = EmpiricalDistribution::from_dataset(&data, None, n_s, n_a, CountOptions::default())?;
    let mut summary = json!({ "converged": sol.diagnostics.converged });
    if let Some(mdp) = &mdp {
        summary["policy_return"] = json!(policy_return(mdp, &policy)?);
        summary["kl_to_data"] = number(occupancy_divergence(mdp, &policy, &rho_o)?);
    }
    write_json(out, "summary.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn eval(args: &EvalArgs, out: &Path) -> Result<()> {
    let mdp: TabularMdp = read_json(&args.mdp, "mdp")?;
    let artifact: PolicyArtifact = read_json(&args.policy, "policy")?;
    let policy = artifact.to_tabular(mdp.n_states())?;
    let mut summary = json!({ "return": policy_return(&mdp, &policy)? });
    if let Some(path) = &args.expert {
        let expert = read_data(path, "expert")?;
        let rho_e = EmpiricalDistribution::from_dataset(
            &expert,
            Some(Source::Expert),
            mdp.n_states(),
            mdp.n_actions(),
            CountOptions::default(),
        )?;
        summary["kl_expert"] = number(occupancy_divergence(&mdp, &policy, &rho_e)?);
    }
    write_json(out, "eval.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn report(args: &ReportArgs, out: &Path) -> Result<()> {
    let mut series = Vec::new();
    for path in &args.curves {
        if !path.exists() {
            bail!("--curve: {} does not exist", path.display());
        }
        let curve = LearningCurve::read_csv(path)?;
        let points: Vec<(f64, f64)> = curve
            .series(&args.metric)
            .into_iter()
            .map(|(e, v)| (e as f64, v))
            .collect();
        if points.is_empty() {
            bail!("--curve: {} has no `{}` points", path.display(), args.metric);
        }
        let label = path
            .parent()
            .and_then(Path::file_name)
            .or(path.file_stem())
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        series.push(Series { label, points });
    }
    let svg = line_plot(&args.metric, "environment episodes", &args.metric, &series);
    fs::write(out.join("report.svg"), svg)?;
    let mut csv = String::from("curve,episodes,value\n");
    for s in &series {
        for (e, v) in &s.points {
            csv.push_str(&format!("{},{e},{v}\n", s.label));
        }
    }
    fs::write(out.join("report.csv"), csv)?;
    println!(
        "plotted {} curves to {}",
        series.len(),
        out.join("report.svg").display()
    );
    Ok(())
}

fn unlearning_cmd(args: &JobsArgs, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (_, report) = unlearning(cfg, args.jobs)?;
    write_json(out, "unlearning.json", &report)?;
    for s in &report.seeds {
        println!("seed {}: stitched {:.3}, random {:.3}", s.seed, s.stitched, s.random);
    }
    println!(
        "stitched at least as good in {}/{} seeds; worst stitched retention {:.3}",
        report.stitched_wins(),
        report.seeds.len(),
        report.min_stitched()
    );
    Ok(())
}

fn compare(args: &CompareArgs, cfg: &RunConfig, out: &Path) -> Result<()> {
    if args.seeds.is_empty() {
        bail!("--seeds: need at least one seed");
    }
    let runs = compare_with_scratch(cfg, &args.seeds, args.jobs)?;
    for r in &runs {
        let dir = out.join(format!("seed_{}", r.seed));
        fs::create_dir_all(&dir)?;
        r.stitched.write_csv(&dir.join("stitched.csv"))?;
        r.scratch.write_csv(&dir.join("scratch.csv"))?;
    }
    let stitched = mean_curve(&runs.iter().map(|r| r.normalized(&r.stitched)).collect::<Vec<_>>());
    let scratch = mean_curve(&runs.iter().map(|r| r.normalized(&r.scratch)).collect::<Vec<_>>());
    let offline: Vec<f64> = runs.iter().map(|r| r.offline_return / r.expert_return).collect();
    let summary = json!({
        "seeds": args.seeds,
        "level": args.level,
        "offline_normalized": offline,
        "stitched_first_reaching": first_reaching(&stitched, args.level),
        "scratch_first_reaching": first_reaching(&scratch, args.level),
        "stitched_mean": stitched,
        "scratch_mean": scratch,
    });
    write_json(out, "compare.json", &summary)?;
    let to_points = |c: &[(usize, f64)]| c.iter().map(|&(e, v)| (e as f64, v)).collect();
    let svg = line_plot(
        "normalized return",
        "environment episodes",
        "return / expert",
        &[
            Series {
                label: "stitched".into(),
                points: to_points(&stitched),
            },
            Series {
                label: "scratch".into(),
                points: to_points(&scratch),
            },
        ],
    );
    fs::write(out.join("compare.svg"), svg)?;
    let episodes = |e: Option<usize>| e.map_or("never".to_string(), |e| format!("{e} episodes"));
    println!(
        "offline {:.3} (min over seeds); stitched reaches {} after {}, scratch after {}",
        offline.iter().copied().fold(f64::INFINITY, f64::min),
        args.level,
        episodes(first_reaching(&stitched, args.level)),
        episodes(first_reaching(&scratch, args.level))
    );
    Ok(())
}

fn gen_fixtures(out: &Path) -> Result<()> {
    for i in 0..FIXTURE_COUNT {
        let f = generate_fixture(i)?;
        write_json(out, &format!("{}.json", f.name), &f)?;
    }
    println!("wrote {FIXTURE_COUNT} fixtures to {}", out.display());
    Ok(())
}
