//! Multi-seed grid experiments shared by the subcommands and the acceptance
//! target.

use anyhow::{Context, Result};
use dualimit::finetune::{
    run_gail, unlearning_experiment, GailDiscriminator, LearningCurve, SeedRetention, UnlearningConfig,
    UnlearningReport, RETURN_METRIC,
};
use dualimit::mdp::{policy_return, TabularPolicy, GRID_ACTIONS};
use dualimit::pipeline::{grid_experiment_data, pretrain_tabular, GridData, OfflineArtifacts};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Runs `f` over `items` on a pool of `jobs` threads, keeping order.
pub fn parallel_map<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    pool.install(|| items.par_iter().map(&f).collect())
}

pub struct Pretrained {
    pub data: GridData,
    pub artifacts: OfflineArtifacts,
    pub stitched: GailDiscriminator,
    pub expert_return: f64,
    pub offline_return: f64,
}

/// Grid data and offline stage for `cfg.seed`.
pub fn pretrain_grid(cfg: &RunConfig) -> Result<Pretrained> {
    let data = grid_experiment_data(&cfg.data)?;
    let n_s = data.mdp.n_states();
    let artifacts = pretrain_tabular(&data.union, n_s, GRID_ACTIONS, &cfg.offline)?;
    let stitched = GailDiscriminator::from_stitched(&artifacts.stitched()?, n_s, GRID_ACTIONS)?;
    Ok(Pretrained {
        expert_return: data.expert_return()?,
        offline_return: policy_return(&data.mdp, &artifacts.policy)?,
        data,
        artifacts,
        stitched,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub expert_return: f64,
    pub offline_return: f64,
    pub stitched: LearningCurve,
    pub scratch: LearningCurve,
}

impl SeedComparison {
    /// `(episodes, return / expert)` for one arm.
    pub fn normalized(&self, curve: &LearningCurve) -> Vec<(usize, f64)> {
        curve
            .series(RETURN_METRIC)
            .into_iter()
            .map(|(e, v)| (e, v / self.expert_return))
            .collect()
    }
}

/// Offline pretraining plus stitched finetuning, against GAIL from a uniform
/// policy and a random discriminator under the same budget, per seed.
pub fn compare_with_scratch(cfg: &RunConfig, seeds: &[u64], jobs: usize) -> Result<Vec<SeedComparison>> {
    parallel_map(seeds, jobs, |&seed| {
        let cfg = cfg.with_seed(seed);
        let pre = pretrain_grid(&cfg).with_context(|| format!("pretraining seed {seed}"))?;
        let n_s = pre.data.mdp.n_states();
        let stitched = run_gail(
            &pre.data.mdp,
            &pre.artifacts.policy,
            pre.stitched.clone(),
            &pre.data.expert,
            &cfg.gail,
        )?;
        let scratch = run_gail(
            &pre.data.mdp,
            &TabularPolicy::uniform(n_s, GRID_ACTIONS),
            GailDiscriminator::random(n_s, GRID_ACTIONS, seed),
            &pre.data.expert,
            &cfg.gail,
        )?;
        Ok(SeedComparison {
            seed,
            expert_return: pre.expert_return,
            offline_return: pre.offline_return,
            stitched: stitched.curve,
            scratch: scratch.curve,
        })
    })
}

/// Pointwise mean of normalized return curves that share evaluation points.
pub fn mean_curve(curves: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, &(e, _))| (e, curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64))
        .collect()
}

pub fn first_reaching(curve: &[(usize, f64)], level: f64) -> Option<usize> {
    curve.iter().find(|(_, v)| *v >= level).map(|(e, _)| *e)
}

/// Unlearning comparison on the data of `cfg.seed`, finetuning seeds in
/// parallel.
pub fn unlearning(cfg: &RunConfig, jobs: usize) -> Result<(Pretrained, UnlearningReport)> {
    let pre = pretrain_grid(cfg)?;
    let settings = &cfg.unlearning;
    let per_seed: Vec<SeedRetention> = parallel_map(&settings.seeds, jobs, |&seed| {
        let one = UnlearningConfig {
            gail: cfg.gail.clone(),
            seeds: vec![seed],
            window: settings.window,
            rollout_aligned_episodes: settings.rollout_aligned_episodes,
            rollout_aligned_steps: settings.rollout_aligned_steps,
        };
        let report = unlearning_experiment(
            &pre.data.mdp,
            &pre.artifacts.policy,
            &pre.stitched,
            &pre.data.expert,
            &one,
        )?;
        Ok(report.seeds.into_iter().next().expect("one seed requested"))
    })?;
    let report = UnlearningReport {
        pretrained_return: pre.offline_return,
        window: settings.window,
        seeds: per_seed,
    };
    Ok((pre, report))
}
