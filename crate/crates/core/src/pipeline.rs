//! Tabular offline pretraining (discriminator, reward, saddle point, policy)
//! and the grid-world experiment setup shared by the command-line driver and
//! the integration tests.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{merge_datasets, sample_trajectories, CountOptions, Dataset, EmpiricalDistribution, Source};
use crate::error::{Error, Result};
use crate::finetune::{GailConfig, GradientScaling};
use crate::mdp::{build_gridworld, policy_return, value_iteration, GridSpec, TabularMdp, TabularPolicy, GRID_ACTIONS};
use crate::policy::{
    extract_policy_closed_form, extract_policy_reverse_kl_tabular, plain_bc_tabular, reverse_kl_target, table_weight,
    weighted_bc_tabular, ExtractionMethod,
};
use crate::reward::{
    auxiliary_reward, fit_discriminator_closed_form, AuxiliaryReward, ClipBounds, DensityDiscriminator,
};
use crate::ssp::{solve_ssp, DualVariables, ExactProblem, SspConfig, SspDiagnostics};
use crate::stitch::{stitch_discriminator, RatioModel, StitchedDiscriminator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub alpha: f64,
    pub beta: f64,
    pub discount: f64,
    pub clip: ClipBounds,
    pub extraction: ExtractionMethod,
    pub counts: CountOptions,
    pub ssp: SspConfig,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            discount: 0.99,
            clip: ClipBounds::default(),
            extraction: ExtractionMethod::ClosedForm,
            counts: CountOptions::default(),
            ssp: SspConfig::exact(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    pub rho_e: EmpiricalDistribution,
    pub rho_o: EmpiricalDistribution,
    pub discriminator: DensityDiscriminator,
    pub reward: AuxiliaryReward,
    pub duals: DualVariables,
    pub diagnostics: SspDiagnostics,
    pub policy: TabularPolicy,
}

impl OfflineArtifacts {
    pub fn stitched(&self) -> Result<StitchedDiscriminator> {
        stitch_discriminator(
            self.discriminator.clone(),
            RatioModel::Table { y: self.duals.y() },
            self.reward.alpha(),
        )
    }
}

/// Runs the offline stage on a union dataset whose expert transitions are
/// tagged. The saddle point is solved on the maximum-likelihood model of the
/// data.
pub fn pretrain_tabular(
    union: &Dataset,
    n_states: usize,
    n_actions: usize,
    cfg: &OfflineConfig,
) -> Result<OfflineArtifacts> {
    union.validate_tabular(n_states, n_actions)?;
    let rho_e = EmpiricalDistribution::from_dataset(union, Some(Source::Expert), n_states, n_actions, cfg.counts)?;
    let rho_o = EmpiricalDistribution::from_dataset(union, None, n_states, n_actions, cfg.counts)?;
    let discriminator = fit_discriminator_closed_form(&rho_e, &rho_o)?.with_clip(cfg.clip);
    let reward = auxiliary_reward(&discriminator, n_states, n_actions, cfg.alpha, cfg.beta)?;
    let problem = ExactProblem::from_dataset_with(
        union,
        &reward,
        n_states,
        n_actions,
        cfg.discount,
        cfg.ssp.undiscounted,
        cfg.counts,
    )?;
    let (duals, diagnostics) = solve_ssp(&problem, &cfg.ssp)?;
    let y = duals.y();
    let policy = match cfg.extraction {
        ExtractionMethod::ClosedForm => extract_policy_closed_form(&rho_o, &y)?,
        ExtractionMethod::WeightedBc => weighted_bc_tabular(union, &table_weight(&y), n_states, n_actions, false)?,
        ExtractionMethod::ReverseKl => {
            // Unclipped ratio; where the expert has no mass the target takes
            // its limit rho_o * y.
            let raw = Array2::from_shape_fn((n_states, n_actions), |(s, a)| {
                let (pe, po) = (rho_e.get(s, a), rho_o.get(s, a));
                if pe > 0.0 {
                    pe / (pe + po)
                } else {
                    0.5
                }
            });
            let mut q = reverse_kl_target(&rho_e, &y, &raw)?;
            for ((s, a), v) in q.indexed_iter_mut() {
                if rho_e.get(s, a) == 0.0 {
                    *v = rho_o.get(s, a) * y[[s, a]];
                }
            }
            extract_policy_reverse_kl_tabular(union, &q)?
        }
        ExtractionMethod::PlainBc => plain_bc_tabular(union, n_states, n_actions)?,
    };
    Ok(OfflineArtifacts {
        rho_e,
        rho_o,
        discriminator,
        reward,
        duals,
        diagnostics,
        policy,
    })
}

/// Grid-world imitation setting: an optimal expert and a uniform-random
/// supplementary policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridExperiment {
    pub grid: GridSpec,
    pub expert_trajectories: usize,
    pub supplementary_trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for GridExperiment {
    fn default() -> Self {
        Self {
            grid: GridSpec::new(8, 8, (7, 7), 0.1, -0.01),
            expert_trajectories: 5,
            supplementary_trajectories: 200,
            horizon: 100,
            seed: 0,
        }
    }
}

impl GridExperiment {
    /// Finetuning settings for this grid: tabular updates scaled per visit,
    /// episodes as long as the offline trajectories.
    pub fn gail_config(&self) -> GailConfig {
        GailConfig {
            episodes: 200,
            horizon: self.horizon,
            rollouts_per_iter: 4,
            lr_disc: 0.5,
            lr_policy: 0.5,
            seed: self.seed,
            policy_scaling: GradientScaling::PerVisit,
            disc_scaling: GradientScaling::PerVisit,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridData {
    pub mdp: TabularMdp,
    pub expert_policy: TabularPolicy,
    pub expert: Dataset,
    pub supplementary: Dataset,
    pub union: Dataset,
}

impl GridData {
    pub fn expert_return(&self) -> Result<f64> {
        policy_return(&self.mdp, &self.expert_policy)
    }
}

pub fn grid_experiment_data(cfg: &GridExperiment) -> Result<GridData> {
    if cfg.expert_trajectories == 0 {
        return Err(Error::invalid("need at least one expert trajectory"));
    }
    let mdp = build_gridworld(&cfg.grid)?;
    let expert_policy = value_iteration(&mdp, 1e-10)?;
    let expert = sample_trajectories(
        &mdp,
        &expert_policy,
        cfg.expert_trajectories,
        cfg.horizon,
        cfg.seed,
        Source::Expert,
    )?;
    let uniform = TabularPolicy::uniform(mdp.n_states(), GRID_ACTIONS);
    let supplementary = if cfg.supplementary_trajectories == 0 {
        Dataset::new(Vec::new())
    } else {
        sample_trajectories(
            &mdp,
            &uniform,
            cfg.supplementary_trajectories,
            cfg.horizon,
            cfg.seed.wrapping_add(1),
            Source::Supplementary,
        )?
    };
    let union = merge_datasets(&expert, &supplementary)?;
    Ok(GridData {
        mdp,
        expert_policy,
        expert,
        supplementary,
        union,
    })
}

/// Per-pair mean of the reward labels; unlabeled pairs are zero.
pub fn reward_table_from_data(data: &Dataset, n_states: usize, n_actions: usize) -> Result<Array2<f64>> {
    let mut sum = Array2::<f64>::zeros((n_states, n_actions));
    let mut count = Array2::<f64>::zeros((n_states, n_actions));
    for t in &data.transitions {
        let (s, a, _) = t.indices()?;
        if s >= n_states || a >= n_actions {
            return Err(Error::invalid(format!("pair ({s}, {a}) out of range")));
        }
        sum[[s, a]] += t.reward.ok_or(Error::MissingReward)?;
        count[[s, a]] += 1.0;
    }
    Ok(Array2::from_shape_fn((n_states, n_actions), |idx| {
        if count[idx] > 0.0 {
            sum[idx] / count[idx]
        } else {
            0.0
        }
    }))
}
