//! Offline reinforcement learning with true rewards: maximize
//! `E_rho[R] - alpha KL(rho || rho_o)` through the same saddle point as the
//! imitation reward, then extract the policy by weighted cloning.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{CountOptions, Dataset, EmpiricalDistribution};
use crate::error::{Error, Result};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::pipeline::reward_table_from_data;
use crate::policy::{
    extract_policy_closed_form, table_weight, weighted_bc_categorical, CategoricalPolicy, ExtractionConfig,
};
use crate::reward::AuxiliaryReward;
use crate::ssp::{solve_ssp, DualVariables, ExactProblem, SspConfig, SspDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffRlConfig {
    pub alpha: f64,
    /// Discount of the empirical model when no MDP is supplied.
    pub discount: f64,
    pub ssp: SspConfig,
}

impl Default for OffRlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            discount: 0.99,
            ssp: SspConfig::exact(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OffRlSolution {
    pub problem: ExactProblem,
    pub duals: DualVariables,
    pub diagnostics: SspDiagnostics,
}

/// Builds the regularized problem with the per-pair mean reward labels and
/// solves it. With `mdp` the true dynamics are used; otherwise the
/// maximum-likelihood model of the data.
pub fn solve_offline_rl(
    data: &Dataset,
    mdp: Option<&TabularMdp>,
    n_states: usize,
    n_actions: usize,
    cfg: &OffRlConfig,
) -> Result<OffRlSolution> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {}", cfg.alpha)));
    }
    data.validate_tabular(n_states, n_actions)?;
    let rewards = reward_table_from_data(data, n_states, n_actions)?;
    let reward = AuxiliaryReward::from_table(rewards, cfg.alpha, 0.0)?;
    let problem = match mdp {
        Some(mdp) => {
            let rho_o = EmpiricalDistribution::from_dataset(data, None, n_states, n_actions, CountOptions::default())?;
            ExactProblem::new(mdp, &rho_o, &reward, cfg.ssp.undiscounted)?
        }
        None => ExactProblem::from_dataset(data, &reward, n_states, n_actions, cfg.discount, cfg.ssp.undiscounted)?,
    };
    let (duals, diagnostics) = solve_ssp(&problem, &cfg.ssp)?;
    Ok(OffRlSolution {
        problem,
        duals,
        diagnostics,
    })
}

/// Tabular policy `pi proportional to rho_o y`.
pub fn extract_offline_rl_policy(data: &Dataset, y_star: &Array2<f64>) -> Result<TabularPolicy> {
    let (n_s, n_a) = y_star.dim();
    let rho_o = EmpiricalDistribution::from_dataset(data, None, n_s, n_a, CountOptions::default())?;
    extract_policy_closed_form(&rho_o, y_star)
}

/// Weighted cloning of a network policy with weights `y(s,a)`.
pub fn extract_offline_rl_network(
    data: &Dataset,
    y_star: &Array2<f64>,
    policy: &mut CategoricalPolicy,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    if y_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("y must be finite"));
    }
    weighted_bc_categorical(policy, data, &table_weight(y_star), cfg)
}
