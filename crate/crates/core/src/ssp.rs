//! Convex-concave saddle point over the flow multiplier `nu` and the
//! occupancy ratio `y`.
//!
//! With reward `R` (already scaled by `alpha` and shifted by `beta`) and
//! `delta(s,a) = R(s,a) + gamma E[nu(s')] - nu(s)`, the objective is
//!
//! ```text
//! F(nu, y) = alpha E_o[(delta + lambda) y - alpha y log(alpha y)] + (1 - gamma) E_mu[nu] - lambda
//! ```
//!
//! where `lambda` is only present in the undiscounted formulation. For fixed
//! `nu` the inner maximizer is `alpha y = exp((delta + lambda) / alpha - 1)`
//! and substituting it gives the convex dual
//! `L(nu) = alpha E_o[exp((delta + lambda) / alpha - 1)] + (1 - gamma) E_mu[nu] - lambda`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{estimate_initial_distribution, CountOptions, Dataset, EmpiricalDistribution, Obs, Transition};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::nn::{Adam, Mlp};
use crate::reward::{AuxiliaryReward, Featurizer};

/// Exponent arguments are clamped to this magnitude inside the solvers.
pub const EXP_CLAMP: f64 = 30.0;
/// `dual_value` refuses exponents above this.
pub const EXP_OVERFLOW: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SspConfig {
    pub lr_nu: f64,
    pub lr_y: f64,
    pub iterations: usize,
    pub undiscounted: bool,
    pub y_clip: (f64, f64),
    pub seed: u64,
    pub batch: usize,
    /// Heavy-ball coefficient on `nu` (exact mode).
    pub momentum: f64,
    pub log_every: usize,
    /// Early stop once the KKT residual and the `nu` gradient stay below
    /// this for `patience` consecutive iterations (exact mode).
    pub tol: f64,
    pub patience: usize,
    /// Primal optimum used to report a duality gap trace.
    pub reference_primal: Option<f64>,
}

impl SspConfig {
    /// Defaults for the full-expectation tabular solver.
    pub fn exact() -> Self {
        Self {
            lr_nu: 0.5,
            lr_y: 1.0,
            iterations: 200_000,
            undiscounted: false,
            y_clip: (1e-6, 1e6),
            seed: 0,
            batch: 256,
            momentum: 0.99,
            log_every: 100,
            tol: 1e-6,
            patience: 100,
            reference_primal: None,
        }
    }

    /// Defaults for minibatch training with Adam.
    pub fn sampled() -> Self {
        Self {
            lr_nu: 3e-4,
            lr_y: 3e-4,
            iterations: 500_000,
            momentum: 0.0,
            log_every: 1000,
            ..Self::exact()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_nu > 0.0 && self.lr_y > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        let (lo, hi) = self.y_clip;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::invalid(format!("invalid y clip [{lo}, {hi}]")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch and log_every must be at least 1"));
        }
        Ok(())
    }
}

/// Tabular dual variables. `y` is stored as `log y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    pub nu: Array1<f64>,
    pub log_y: Array2<f64>,
    pub lambda: Option<f64>,
}

impl DualVariables {
    /// `nu = 0`, `y = 1`, and `lambda = 0` when undiscounted.
    pub fn initial(n_states: usize, n_actions: usize, undiscounted: bool) -> Self {
        Self {
            nu: Array1::zeros(n_states),
            log_y: Array2::zeros((n_states, n_actions)),
            lambda: undiscounted.then_some(0.0),
        }
    }

    pub fn from_tables(nu: Array1<f64>, y: &Array2<f64>, lambda: Option<f64>) -> Result<Self> {
        if y.nrows() != nu.len() {
            return Err(Error::shape(nu.len(), y.nrows()));
        }
        if y.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("y must be positive and finite"));
        }
        Ok(Self {
            nu,
            log_y: y.mapv(f64::ln),
            lambda,
        })
    }

    pub fn y(&self) -> Array2<f64> {
        self.log_y.mapv(f64::exp)
    }

    fn lambda_value(&self) -> f64 {
        self.lambda.unwrap_or(0.0)
    }
}

/// Full-expectation problem on a known (or empirical) model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactProblem {
    mdp: TabularMdp,
    weights: Array2<f64>,
    reward: Array2<f64>,
    alpha: f64,
}

impl ExactProblem {
    /// `rho_o` weights the expectation; the undiscounted flag overrides the
    /// model's discount with 1.
    pub fn new(
        mdp: &TabularMdp,
        rho_o: &EmpiricalDistribution,
        reward: &AuxiliaryReward,
        undiscounted: bool,
    ) -> Result<Self> {
        let dims = (mdp.n_states(), mdp.n_actions());
        if rho_o.dim() != dims {
            return Err(Error::shape(format!("{dims:?}"), format!("{:?}", rho_o.dim())));
        }
        let table = reward.table_or_err()?;
        if table.dim() != dims {
            return Err(Error::shape(format!("{dims:?}"), format!("{:?}", table.dim())));
        }
        let mdp = if undiscounted {
            mdp.with_discount(1.0)?
        } else {
            mdp.clone()
        };
        Ok(Self {
            mdp,
            weights: rho_o.probs().clone(),
            reward: table.clone(),
            alpha: reward.alpha(),
        })
    }

    /// Problem on the maximum-likelihood model of `dataset`: transition
    /// counts, visit frequencies and episode-start frequencies. Pairs never
    /// visited get a self-loop; they carry no weight.
    pub fn from_dataset(
        dataset: &Dataset,
        reward: &AuxiliaryReward,
        n_states: usize,
        n_actions: usize,
        discount: f64,
        undiscounted: bool,
    ) -> Result<Self> {
        Self::from_dataset_with(
            dataset,
            reward,
            n_states,
            n_actions,
            discount,
            undiscounted,
            CountOptions::default(),
        )
    }

    /// [`ExactProblem::from_dataset`] with explicit counting options for the
    /// data distribution.
    pub fn from_dataset_with(
        dataset: &Dataset,
        reward: &AuxiliaryReward,
        n_states: usize,
        n_actions: usize,
        discount: f64,
        undiscounted: bool,
        options: CountOptions,
    ) -> Result<Self> {
        dataset.validate_tabular(n_states, n_actions)?;
        let mut counts = Array3::<f64>::zeros((n_states, n_actions, n_states));
        for item in dataset.indexed() {
            let (s, a, s2) = item?;
            counts[[s, a, s2]] += 1.0;
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let total: f64 = counts.slice(ndarray::s![s, a, ..]).sum();
                if total == 0.0 {
                    counts[[s, a, s]] = 1.0;
                } else {
                    counts.slice_mut(ndarray::s![s, a, ..]).mapv_inplace(|c| c / total);
                }
            }
        }
        let initial = match estimate_initial_distribution(dataset, n_states) {
            Ok(mu) => mu,
            Err(Error::Empty(_)) if undiscounted => Array1::from_elem(n_states, 1.0 / n_states as f64),
            Err(e) => return Err(e),
        };
        let mdp = TabularMdp::new(counts, initial, discount, None)?;
        let rho_o = EmpiricalDistribution::from_dataset(dataset, None, n_states, n_actions, options)?;
        Self::new(&mdp, &rho_o, reward, undiscounted)
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn discount(&self) -> f64 {
        self.mdp.discount()
    }

    pub fn is_undiscounted(&self) -> bool {
        self.mdp.is_undiscounted()
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn check(&self, duals: &DualVariables) -> Result<()> {
        if duals.nu.len() != self.n_states() || duals.log_y.dim() != self.weights.dim() {
            return Err(Error::shape(
                format!("nu [{}], y {:?}", self.n_states(), self.weights.dim()),
                format!("nu [{}], y {:?}", duals.nu.len(), duals.log_y.dim()),
            ));
        }
        if duals.lambda.is_some() != self.is_undiscounted() {
            return Err(Error::invalid("lambda must be present exactly in undiscounted mode"));
        }
        Ok(())
    }
}

/// `delta(s,a) = R(s,a) + gamma sum_s' T(s'|s,a) nu(s') - nu(s)`.
pub fn delta_expectation(nu: &Array1<f64>, reward: &Array2<f64>, mdp: &TabularMdp) -> Result<Array2<f64>> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if nu.len() != n_s || reward.dim() != (n_s, n_a) {
        return Err(Error::shape(
            format!("nu [{n_s}], reward [{n_s}, {n_a}]"),
            format!("nu [{}], reward {:?}", nu.len(), reward.dim()),
        ));
    }
    let gamma = mdp.discount();
    let nu_slice = nu.as_slice().expect("contiguous");
    Ok(Array2::from_shape_fn((n_s, n_a), |(s, a)| {
        reward[[s, a]] + gamma * mdp.expected_next(s, a, nu_slice) - nu[s]
    }))
}

/// Single-transition surrogate `R(s,a) + gamma nu(s') - nu(s)`.
pub fn delta_sample(reward: f64, nu_s: f64, nu_next: f64, discount: f64) -> f64 {
    reward + discount * nu_next - nu_s
}

fn shifted_delta(problem: &ExactProblem, duals: &DualVariables) -> Result<Array2<f64>> {
    let lambda = duals.lambda_value();
    Ok(delta_expectation(&duals.nu, &problem.reward, &problem.mdp)?.mapv(|d| d + lambda))
}

fn check_y_range(duals: &DualVariables, y_clip: (f64, f64)) -> Result<()> {
    let (lo, hi) = (y_clip.0.ln() - 1e-12, y_clip.1.ln() + 1e-12);
    if let Some(v) = duals.log_y.iter().find(|&&u| !(lo..=hi).contains(&u)) {
        return Err(Error::invalid(format!(
            "y = {:.3e} outside clip [{:e}, {:e}]",
            v.exp(),
            y_clip.0,
            y_clip.1
        )));
    }
    Ok(())
}

/// `F(nu, y)` with exact expectations.
pub fn ssp_objective(duals: &DualVariables, problem: &ExactProblem, y_clip: (f64, f64)) -> Result<f64> {
    problem.check(duals)?;
    check_y_range(duals, y_clip)?;
    let alpha = problem.alpha;
    let delta = shifted_delta(problem, duals)?;
    let mut total = 0.0;
    for ((idx, &w), &u) in problem.weights.indexed_iter().zip(duals.log_y.iter()) {
        let y = u.exp();
        total += w * (delta[idx] * y - alpha * y * (alpha.ln() + u));
    }
    Ok(alpha * total + linear_terms(duals, problem))
}

fn linear_terms(duals: &DualVariables, problem: &ExactProblem) -> f64 {
    (1.0 - problem.discount()) * problem.mdp.initial().dot(&duals.nu) - duals.lambda_value()
}

/// Exact partial derivatives of `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct SspGradients {
    pub nu: Array1<f64>,
    /// With respect to `y`, not `log y`.
    pub y: Array2<f64>,
    pub lambda: Option<f64>,
}

pub fn ssp_gradients(duals: &DualVariables, problem: &ExactProblem) -> Result<SspGradients> {
    problem.check(duals)?;
    let alpha = problem.alpha;
    let delta = shifted_delta(problem, duals)?;
    let y = duals.y();
    let grad_y = Array2::from_shape_fn(y.dim(), |idx| {
        alpha * problem.weights[idx] * (delta[idx] - alpha * (alpha.ln() + duals.log_y[idx]) - alpha)
    });
    Ok(SspGradients {
        nu: nu_gradient(problem, &y),
        y: grad_y,
        lambda: duals.lambda.map(|_| alpha * (&problem.weights * &y).sum() - 1.0),
    })
}

fn nu_gradient(problem: &ExactProblem, y: &Array2<f64>) -> Array1<f64> {
    let gamma = problem.discount();
    let alpha = problem.alpha;
    let mut grad = problem.mdp.initial().mapv(|mu| (1.0 - gamma) * mu);
    for ((s, a), &w) in problem.weights.indexed_iter() {
        if w == 0.0 {
            continue;
        }
        let mass = alpha * w * y[[s, a]];
        grad[s] -= mass;
        for &(s2, p) in problem.mdp.successors(s, a) {
            grad[s2] += gamma * p * mass;
        }
    }
    grad
}

/// Inner maximizer `y = exp((delta + lambda) / alpha - 1) / alpha`, clipped.
pub fn closed_form_inner_y(
    nu: &Array1<f64>,
    lambda: Option<f64>,
    problem: &ExactProblem,
    y_clip: (f64, f64),
) -> Result<Array2<f64>> {
    let alpha = problem.alpha;
    let shift = lambda.unwrap_or(0.0);
    let delta = delta_expectation(nu, &problem.reward, &problem.mdp)?;
    Ok(delta.mapv(|d| (((d + shift) / alpha - 1.0).exp() / alpha).clamp(y_clip.0, y_clip.1)))
}

/// Dual objective `L(nu)`; errors instead of overflowing.
pub fn dual_value(nu: &Array1<f64>, lambda: Option<f64>, problem: &ExactProblem) -> Result<f64> {
    let alpha = problem.alpha;
    let shift = lambda.unwrap_or(0.0);
    let delta = delta_expectation(nu, &problem.reward, &problem.mdp)?;
    let mut total = 0.0;
    for (&w, &d) in problem.weights.iter().zip(delta.iter()) {
        let z = (d + shift) / alpha - 1.0;
        if z > EXP_OVERFLOW {
            return Err(Error::Overflow { value: z });
        }
        total += w * z.exp();
    }
    let gamma = problem.discount();
    Ok(alpha * total + (1.0 - gamma) * problem.mdp.initial().dot(nu) - shift)
}

/// `max |y - y_closed_form(nu)|`.
pub fn kkt_residual(duals: &DualVariables, problem: &ExactProblem, y_clip: (f64, f64)) -> Result<f64> {
    let target = closed_form_inner_y(&duals.nu, duals.lambda, problem, y_clip)?;
    Ok(duals
        .log_y
        .iter()
        .zip(target.iter())
        .map(|(u, t)| (u.exp() - t).abs())
        .fold(0.0, f64::max))
}

/// `rho(s,a) = alpha rho_o(s,a) y(s,a)`.
pub fn optimal_occupancy(duals: &DualVariables, problem: &ExactProblem) -> Array2<f64> {
    &problem.weights * &duals.y() * problem.alpha
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SspDiagnostics {
    pub iterations: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub kkt_residual: Vec<f64>,
    /// Exact dual value (exact mode only).
    pub dual_trace: Vec<f64>,
    pub duality_gap: Option<Vec<f64>>,
    /// Exponent arguments that hit the clamp.
    pub overflow_count: usize,
    pub converged: bool,
    pub steps_taken: usize,
}

impl SspDiagnostics {
    fn record(&mut self, iteration: usize, objective: f64, kkt: f64, dual: Option<f64>, reference: Option<f64>) {
        self.iterations.push(iteration);
        self.objective_trace.push(objective);
        self.kkt_residual.push(kkt);
        if let Some(d) = dual {
            self.dual_trace.push(d);
            if let Some(p) = reference {
                self.duality_gap.get_or_insert_with(Vec::new).push(d - p);
            }
        }
    }

    /// `iter,objective,kkt_residual,gap` rows; `gap` is empty without a reference.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "iter,objective,kkt_residual,gap")?;
        for (i, &it) in self.iterations.iter().enumerate() {
            let gap = self
                .duality_gap
                .as_ref()
                .and_then(|g| g.get(i))
                .map(|g| g.to_string())
                .unwrap_or_default();
            writeln!(out, "{it},{},{},{gap}", self.objective_trace[i], self.kkt_residual[i])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Alternating ascent on `log y` and descent on `nu` (and `lambda`) with
/// exact expectations.
///
/// The `y` step is the log-space ascent step preconditioned by the curvature
/// of the entropy term, `u += lr_y (u_target(nu) - u)`; `lr_y = 1` reduces to
/// exact dual descent. The `nu` step is a diagonally preconditioned
/// heavy-ball step with restart whenever the momentum opposes the gradient.
pub fn solve_ssp(problem: &ExactProblem, cfg: &SspConfig) -> Result<(DualVariables, SspDiagnostics)> {
    cfg.validate()?;
    if cfg.undiscounted != problem.is_undiscounted() {
        return Err(Error::invalid("config and problem disagree on the undiscounted flag"));
    }
    if cfg.lr_y > 1.0 {
        return Err(Error::invalid("exact-mode lr_y must not exceed 1"));
    }
    let (n_s, n_a) = (problem.n_states(), problem.n_actions());
    let alpha = problem.alpha;
    let gamma = problem.discount();
    let (u_lo, u_hi) = (cfg.y_clip.0.ln(), cfg.y_clip.1.ln());
    let mut duals = DualVariables::initial(n_s, n_a, problem.is_undiscounted());
    let mut velocity = Array1::<f64>::zeros(n_s);
    let mut lambda_velocity = 0.0;
    let mut diag = SspDiagnostics::default();
    let mut streak = 0;
    // |g| * ||g||_1 of each flow column, for the Gershgorin preconditioner.
    let mut overlap = Array2::<f64>::zeros((n_s * n_a, n_s));
    let mut col_norm = vec![0.0; n_s * n_a];
    for s in 0..n_s {
        for a in 0..n_a {
            let row = s * n_a + a;
            let mut g = vec![0.0; n_s];
            g[s] -= 1.0;
            for &(s2, p) in problem.mdp.successors(s, a) {
                g[s2] += gamma * p;
            }
            col_norm[row] = g.iter().map(|x| x.abs()).sum();
            for (t, x) in g.iter().enumerate() {
                overlap[[row, t]] = x.abs();
            }
        }
    }

    for step in 0..cfg.iterations {
        let delta = shifted_delta(problem, &duals)?;
        let mut kkt: f64 = 0.0;
        for (idx, d) in delta.indexed_iter() {
            let z = d / alpha;
            if z.abs() > EXP_CLAMP {
                diag.overflow_count += 1;
            }
            let target = (z.clamp(-EXP_CLAMP, EXP_CLAMP) - 1.0 - alpha.ln()).clamp(u_lo, u_hi);
            let u = &mut duals.log_y[idx];
            kkt = kkt.max((u.exp() - target.exp()).abs());
            *u += cfg.lr_y * (target - *u);
        }
        let y = duals.y();
        let grad = nu_gradient(problem, &y);
        let grad_lambda = duals.lambda.map(|_| alpha * (&problem.weights * &y).sum() - 1.0);
        if grad.iter().any(|g| !g.is_finite()) || grad_lambda.is_some_and(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "nu gradient".into(),
                step,
            });
        }

        let grad_norm = grad
            .iter()
            .chain(grad_lambda.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        if step % cfg.log_every == 0 {
            let objective = ssp_objective(&duals, problem, cfg.y_clip)?;
            let dual = dual_value(&duals.nu, duals.lambda, problem)?;
            diag.record(step, objective, kkt, Some(dual), cfg.reference_primal);
        }
        diag.steps_taken = step + 1;
        if kkt < cfg.tol && grad_norm < cfg.tol {
            streak += 1;
            if streak >= cfg.patience {
                diag.converged = true;
                break;
            }
        } else {
            streak = 0;
        }

        let mut precond = Array1::<f64>::zeros(n_s);
        let mut lambda_precond = 0.0;
        for ((s, a), &w) in problem.weights.indexed_iter() {
            let row = s * n_a + a;
            let mass = w * y[[s, a]];
            let extra = if duals.lambda.is_some() { 1.0 } else { 0.0 };
            for t in 0..n_s {
                precond[t] += mass * overlap[[row, t]] * (col_norm[row] + extra);
            }
            lambda_precond += mass * (1.0 + col_norm[row]);
        }
        let mut opposing = 0.0;
        for s in 0..n_s {
            opposing += velocity[s] * grad[s];
        }
        if let Some(gl) = grad_lambda {
            opposing += lambda_velocity * gl;
        }
        if opposing > 0.0 {
            velocity.fill(0.0);
            lambda_velocity = 0.0;
        }
        for s in 0..n_s {
            let p = precond[s].max(1e-12);
            velocity[s] = cfg.momentum * velocity[s] - cfg.lr_nu * grad[s] / p;
            duals.nu[s] += velocity[s];
        }
        if let (Some(lambda), Some(gl)) = (duals.lambda.as_mut(), grad_lambda) {
            lambda_velocity = cfg.momentum * lambda_velocity - cfg.lr_nu * gl / lambda_precond.max(1e-12);
            *lambda += lambda_velocity;
        }
    }
    let last = diag.steps_taken.saturating_sub(1);
    if diag.iterations.last() != Some(&last) {
        let objective = ssp_objective(&duals, problem, cfg.y_clip)?;
        let dual = dual_value(&duals.nu, duals.lambda, problem)?;
        let kkt = kkt_residual(&duals, problem, cfg.y_clip)?;
        diag.record(last, objective, kkt, Some(dual), cfg.reference_primal);
    }
    Ok((duals, diag))
}

/// Same solver restricted to the normalized formulation.
pub fn solve_undiscounted(problem: &ExactProblem, cfg: &SspConfig) -> Result<(DualVariables, SspDiagnostics)> {
    if !problem.is_undiscounted() || !cfg.undiscounted {
        return Err(Error::invalid(
            "undiscounted solve needs an undiscounted problem and config",
        ));
    }
    solve_ssp(problem, cfg)
}

/// Dual variables that can be trained from sampled transitions.
pub trait DualModel {
    fn nu(&self, s: &Obs) -> Result<f64>;
    /// Unclipped `log y`.
    fn log_y(&self, s: &Obs, a: &Obs) -> Result<f64>;
    fn nu_params(&self) -> &[f64];
    fn nu_params_mut(&mut self) -> &mut [f64];
    fn y_params(&self) -> &[f64];
    fn y_params_mut(&mut self) -> &mut [f64];
    fn add_nu_grad(&self, s: &Obs, coef: f64, grad: &mut [f64]) -> Result<()>;
    fn add_log_y_grad(&self, s: &Obs, a: &Obs, coef: f64, grad: &mut [f64]) -> Result<()>;
    fn lambda(&self) -> Option<f64>;
    fn set_lambda(&mut self, value: f64);
}

impl DualModel for DualVariables {
    fn nu(&self, s: &Obs) -> Result<f64> {
        let s = s.index()?;
        self.nu
            .get(s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("state {s} out of range")))
    }

    fn log_y(&self, s: &Obs, a: &Obs) -> Result<f64> {
        let (s, a) = (s.index()?, a.index()?);
        self.log_y
            .get((s, a))
            .copied()
            .ok_or_else(|| Error::invalid(format!("pair ({s}, {a}) out of range")))
    }

    fn nu_params(&self) -> &[f64] {
        self.nu.as_slice().expect("contiguous")
    }

    fn nu_params_mut(&mut self) -> &mut [f64] {
        self.nu.as_slice_mut().expect("contiguous")
    }

    fn y_params(&self) -> &[f64] {
        self.log_y.as_slice().expect("contiguous")
    }

    fn y_params_mut(&mut self) -> &mut [f64] {
        self.log_y.as_slice_mut().expect("contiguous")
    }

    fn add_nu_grad(&self, s: &Obs, coef: f64, grad: &mut [f64]) -> Result<()> {
        grad[s.index()?] += coef;
        Ok(())
    }

    fn add_log_y_grad(&self, s: &Obs, a: &Obs, coef: f64, grad: &mut [f64]) -> Result<()> {
        grad[s.index()? * self.log_y.ncols() + a.index()?] += coef;
        Ok(())
    }

    fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    fn set_lambda(&mut self, value: f64) {
        self.lambda = Some(value);
    }
}

/// Network-parameterized `nu(s)` and `log y(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDuals {
    pub nu: Mlp,
    pub log_y: Mlp,
    pub featurizer: Featurizer,
    pub lambda: Option<f64>,
}

impl NetworkDuals {
    pub fn new<R: rand::Rng + ?Sized>(
        featurizer: Featurizer,
        hidden: &[usize],
        undiscounted: bool,
        rng: &mut R,
    ) -> Self {
        let sizes = |input: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(1);
            v
        };
        let nu = Mlp::new(&sizes(featurizer.state_dim()), rng);
        let mut log_y = Mlp::new(&sizes(featurizer.pair_dim()), rng);
        // Start at y = 1 like the tabular variables.
        let last = log_y.architecture().sizes.len() - 2;
        let width = log_y.architecture().sizes[last];
        for c in 0..width {
            let i = log_y.weight_index(last, 0, c);
            log_y.params_mut()[i] = 0.0;
        }
        let b = log_y.bias_index(last, 0);
        log_y.params_mut()[b] = 0.0;
        Self {
            nu,
            log_y,
            featurizer,
            lambda: undiscounted.then_some(0.0),
        }
    }

    /// Tabulates `(nu, log y)` over a one-hot featurized space.
    pub fn to_tables(&self, n_states: usize, n_actions: usize) -> Result<DualVariables> {
        let nu = (0..n_states)
            .map(|s| self.nu(&Obs::Index(s)))
            .collect::<Result<Vec<_>>>()?;
        let mut log_y = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for a in 0..n_actions {
                log_y[[s, a]] = self.log_y(&Obs::Index(s), &Obs::Index(a))?;
            }
        }
        Ok(DualVariables {
            nu: Array1::from(nu),
            log_y,
            lambda: self.lambda,
        })
    }
}

impl DualModel for NetworkDuals {
    fn nu(&self, s: &Obs) -> Result<f64> {
        Ok(self.nu.forward(&self.featurizer.state(s)?)?[0])
    }

    fn log_y(&self, s: &Obs, a: &Obs) -> Result<f64> {
        Ok(self.log_y.forward(&self.featurizer.pair(s, a)?)?[0])
    }

    fn nu_params(&self) -> &[f64] {
        self.nu.params()
    }

    fn nu_params_mut(&mut self) -> &mut [f64] {
        self.nu.params_mut()
    }

    fn y_params(&self) -> &[f64] {
        self.log_y.params()
    }

    fn y_params_mut(&mut self) -> &mut [f64] {
        self.log_y.params_mut()
    }

    fn add_nu_grad(&self, s: &Obs, coef: f64, grad: &mut [f64]) -> Result<()> {
        let trace = self.nu.forward_trace(&self.featurizer.state(s)?)?;
        let mut buf = crate::nn::GradientBuffer(grad.to_vec());
        self.nu.backward(&trace, &[coef], &mut buf)?;
        grad.copy_from_slice(&buf.0);
        Ok(())
    }

    fn add_log_y_grad(&self, s: &Obs, a: &Obs, coef: f64, grad: &mut [f64]) -> Result<()> {
        let trace = self.log_y.forward_trace(&self.featurizer.pair(s, a)?)?;
        let mut buf = crate::nn::GradientBuffer(grad.to_vec());
        self.log_y.backward(&trace, &[coef], &mut buf)?;
        grad.copy_from_slice(&buf.0);
        Ok(())
    }

    fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    fn set_lambda(&mut self, value: f64) {
        self.lambda = Some(value);
    }
}

/// Sample-form objective on a batch, plus its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledEvaluation {
    pub objective: f64,
    pub grad_nu: Vec<f64>,
    /// With respect to the `log y` parameters.
    pub grad_y: Vec<f64>,
    pub grad_lambda: Option<f64>,
    /// `max |y - y_closed_form(delta_sample)|` over the batch.
    pub kkt_estimate: f64,
    pub clamped: usize,
}

/// `alpha mean_i[(delta_i + lambda) y_i - alpha y_i log(alpha y_i)]
/// + (1 - gamma) mean_j nu(s0_j) - lambda` with `delta_i` the one-sample surrogate.
pub fn sampled_objective<M: DualModel>(
    model: &M,
    batch: &[&Transition],
    starts: &[&Obs],
    reward: &AuxiliaryReward,
    discount: f64,
    y_clip: (f64, f64),
) -> Result<SampledEvaluation> {
    if batch.is_empty() {
        return Err(Error::Empty("sampled objective needs transitions".into()));
    }
    let alpha = reward.alpha();
    let lambda = model.lambda().unwrap_or(0.0);
    let (u_lo, u_hi) = (y_clip.0.ln(), y_clip.1.ln());
    let mut grad_nu = vec![0.0; model.nu_params().len()];
    let mut grad_y = vec![0.0; model.y_params().len()];
    let mut objective = 0.0;
    let mut mass = 0.0;
    let mut kkt: f64 = 0.0;
    let mut clamped = 0;
    let inv_b = 1.0 / batch.len() as f64;
    for t in batch {
        let r = reward.value(&t.state, &t.action)?;
        let (nu_s, nu_next) = (model.nu(&t.state)?, model.nu(&t.next_state)?);
        let d = delta_sample(r, nu_s, nu_next, discount) + lambda;
        let raw = model.log_y(&t.state, &t.action)?;
        let u = raw.clamp(u_lo, u_hi);
        let y = u.exp();
        objective += alpha * inv_b * (d * y - alpha * y * (alpha.ln() + u));
        mass += alpha * inv_b * y;
        let z = d / alpha;
        if z.abs() > EXP_CLAMP {
            clamped += 1;
        }
        let target = ((z.clamp(-EXP_CLAMP, EXP_CLAMP) - 1.0).exp() / alpha).clamp(y_clip.0, y_clip.1);
        kkt = kkt.max((y - target).abs());
        let coef_y = alpha * inv_b * y;
        model.add_nu_grad(&t.next_state, discount * coef_y, &mut grad_nu)?;
        model.add_nu_grad(&t.state, -coef_y, &mut grad_nu)?;
        if raw == u {
            let dy = alpha * inv_b * (d - alpha * (alpha.ln() + u) - alpha);
            model.add_log_y_grad(&t.state, &t.action, dy * y, &mut grad_y)?;
        }
    }
    if discount < 1.0 {
        if starts.is_empty() {
            return Err(Error::Empty("discounted objective needs episode starts".into()));
        }
        let w = (1.0 - discount) / starts.len() as f64;
        for s in starts {
            objective += w * model.nu(s)?;
            model.add_nu_grad(s, w, &mut grad_nu)?;
        }
    }
    objective -= model.lambda().map_or(0.0, |l| l);
    Ok(SampledEvaluation {
        objective,
        grad_nu,
        grad_y,
        grad_lambda: model.lambda().map(|_| mass - 1.0),
        kkt_estimate: kkt,
        clamped,
    })
}

/// Stochastic gradient descent on `nu` and ascent on `log y` with Adam.
pub fn solve_ssp_sampled<M: DualModel>(
    model: &mut M,
    dataset: &Dataset,
    reward: &AuxiliaryReward,
    discount: f64,
    cfg: &SspConfig,
) -> Result<SspDiagnostics> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("ssp dataset is empty".into()));
    }
    let gamma = if cfg.undiscounted { 1.0 } else { discount };
    if cfg.undiscounted != model.lambda().is_some() {
        return Err(Error::invalid("lambda must be present exactly in undiscounted mode"));
    }
    let transitions: Vec<&Transition> = dataset.transitions.iter().collect();
    let starts: Vec<&Obs> = dataset
        .transitions
        .iter()
        .filter(|t| t.is_episode_start)
        .map(|t| &t.state)
        .collect();
    if gamma < 1.0 && starts.is_empty() {
        return Err(Error::Empty("dataset has no episode starts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_nu = Adam::new(model.nu_params().len(), cfg.lr_nu);
    let mut adam_y = Adam::new(model.y_params().len(), cfg.lr_y);
    let mut adam_lambda = Adam::new(1, cfg.lr_nu);
    let mut diag = SspDiagnostics::default();
    for step in 0..cfg.iterations {
        let batch: Vec<&Transition> = (0..cfg.batch).map(|_| *transitions.choose(&mut rng).unwrap()).collect();
        let start_batch: Vec<&Obs> = if gamma < 1.0 {
            (0..cfg.batch).map(|_| *starts.choose(&mut rng).unwrap()).collect()
        } else {
            Vec::new()
        };
        let eval = sampled_objective(model, &batch, &start_batch, reward, gamma, cfg.y_clip)?;
        diag.overflow_count += eval.clamped;
        let finite = eval.objective.is_finite()
            && eval.grad_nu.iter().chain(&eval.grad_y).all(|g| g.is_finite())
            && eval.grad_lambda.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite {
                context: format!("sampled objective (last value {:?})", diag.objective_trace.last()),
                step,
            });
        }
        if step % cfg.log_every == 0 {
            diag.record(step, eval.objective, eval.kkt_estimate, None, None);
        }
        adam_nu.step(model.nu_params_mut(), &eval.grad_nu)?;
        let ascent: Vec<f64> = eval.grad_y.iter().map(|g| -g).collect();
        adam_y.step(model.y_params_mut(), &ascent)?;
        if let (Some(l), Some(g)) = (model.lambda(), eval.grad_lambda) {
            let mut p = [l];
            adam_lambda.step(&mut p, &[g])?;
            model.set_lambda(p[0]);
        }
        diag.steps_taken = step + 1;
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountOptions, Source};
    use crate::mdp::TabularPolicy;
    use rand::Rng;

    fn one_state(gamma: f64, r: f64, alpha: f64) -> ExactProblem {
        let mdp = TabularMdp::new(Array3::ones((1, 1, 1)), Array1::ones(1), gamma, None).unwrap();
        let rho = EmpiricalDistribution::from_table(Array2::ones((1, 1))).unwrap();
        let reward = AuxiliaryReward::from_table(Array2::from_elem((1, 1), r), alpha, 0.0).unwrap();
        ExactProblem::new(&mdp, &rho, &reward, gamma == 1.0).unwrap()
    }

    fn random_problem(seed: u64, n_s: usize, n_a: usize, gamma: f64, alpha: f64, undiscounted: bool) -> ExactProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(n_s, n_a, gamma, &mut rng).unwrap();
        let rho = EmpiricalDistribution::from_table(Array2::from_shape_fn((n_s, n_a), |_| 0.1 + rng.random::<f64>()))
            .unwrap();
        let r = Array2::from_shape_fn((n_s, n_a), |_| rng.random_range(-2.0..2.0));
        let reward = AuxiliaryReward::from_table(r, alpha, 0.0).unwrap();
        ExactProblem::new(&mdp, &rho, &reward, undiscounted).unwrap()
    }

    #[test]
    fn delta_examples() {
        let p = one_state(0.9, 0.3, 1.0);
        let d = delta_expectation(&Array1::zeros(1), p.reward(), p.mdp()).unwrap();
        assert_eq!(d[[0, 0]], 0.3);
        // s0 -> s1 deterministically.
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 1]] = 1.0;
        t[[1, 0, 1]] = 1.0;
        let mdp = TabularMdp::new(t, Array1::from(vec![1.0, 0.0]), 0.5, None).unwrap();
        let d = delta_expectation(&Array1::from(vec![1.0, 2.0]), &Array2::zeros((2, 1)), &mdp).unwrap();
        assert_eq!(d[[0, 0]], 0.0);
        assert!((delta_sample(0.7, 3.0, 3.0, 1.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn delta_matches_sampled_next_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = TabularMdp::random(4, 2, 0.9, &mut rng).unwrap();
        let nu = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((4, 2), |_| rng.random::<f64>());
        let exact = delta_expectation(&nu, &r, &mdp).unwrap();
        let n = 100_000;
        let (s, a) = (2, 1);
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let next =
                    crate::mdp::sample_index(mdp.transition().slice(ndarray::s![s, a, ..]).iter().copied(), &mut rng);
                delta_sample(r[[s, a]], nu[s], nu[next], 0.9)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - exact[[s, a]]).abs() <= 3.0 * (var / n as f64).sqrt() + 1e-12);
    }

    #[test]
    fn objective_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = TabularMdp::random(3, 2, 0.99, &mut rng).unwrap();
        let rho = EmpiricalDistribution::from_table(Array2::ones((3, 2))).unwrap();
        let reward = AuxiliaryReward::from_table(Array2::zeros((3, 2)), 1.0, 0.0).unwrap();
        let p = ExactProblem::new(&mdp, &rho, &reward, false).unwrap();
        let duals = DualVariables::initial(3, 2, false);
        assert_eq!(ssp_objective(&duals, &p, (1e-6, 1e6)).unwrap(), 0.0);

        let (gamma, r) = (0.9, 0.4);
        let p = one_state(gamma, r, 1.0);
        let duals = DualVariables::from_tables(
            Array1::from_elem(1, (r - 1.0) / (1.0 - gamma)),
            &Array2::ones((1, 1)),
            None,
        )
        .unwrap();
        assert!((ssp_objective(&duals, &p, (1e-6, 1e6)).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn scaled_objective_matches_hand_expansion() {
        let p = random_problem(2, 3, 2, 0.9, 2.0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nu = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_elem((3, 2), 0.5);
        let duals = DualVariables::from_tables(nu.clone(), &y, None).unwrap();
        let got = ssp_objective(&duals, &p, (1e-6, 1e6)).unwrap();
        // alpha y = 1 so the entropy term vanishes.
        let mut want = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                let mut next = 0.0;
                for s2 in 0..3 {
                    next += p.mdp().transition()[[s, a, s2]] * nu[s2];
                }
                let delta = p.reward()[[s, a]] + 0.9 * next - nu[s];
                want += 2.0 * p.weights()[[s, a]] * delta * 0.5;
            }
        }
        for s in 0..3 {
            want += 0.1 * p.mdp().initial()[s] * nu[s];
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_y_outside_clip() {
        let p = one_state(0.9, 0.0, 1.0);
        let duals = DualVariables::from_tables(Array1::zeros(1), &Array2::from_elem((1, 1), 1e7), None).unwrap();
        assert!(ssp_objective(&duals, &p, (1e-6, 1e6)).is_err());
    }

    #[test]
    fn gradient_examples() {
        // Zero y gradient at the inner maximizer.
        let p = random_problem(4, 3, 2, 0.9, 1.5, false);
        let nu = Array1::from(vec![0.3, -0.2, 0.5]);
        let y = closed_form_inner_y(&nu, None, &p, (1e-6, 1e6)).unwrap();
        let duals = DualVariables::from_tables(nu, &y, None).unwrap();
        let g = ssp_gradients(&duals, &p).unwrap();
        assert!(g.y.iter().all(|v| v.abs() < 1e-12));

        // One state: grad_nu = -(1 - gamma) exp(delta - 1) + (1 - gamma).
        let gamma = 0.9;
        let p = one_state(gamma, 0.2, 1.0);
        let nu = Array1::from_elem(1, -3.0);
        let delta = 0.2 + (gamma - 1.0) * -3.0;
        let y = Array2::from_elem((1, 1), f64::exp(delta - 1.0));
        let g = ssp_gradients(&DualVariables::from_tables(nu, &y, None).unwrap(), &p).unwrap();
        let want = -(1.0 - gamma) * (delta - 1.0f64).exp() + (1.0 - gamma);
        assert!((g.nu[0] - want).abs() < 1e-12);
    }

    fn flatten(d: &DualVariables) -> Vec<f64> {
        let mut v: Vec<f64> = d.nu.to_vec();
        v.extend(d.y().iter());
        v.extend(d.lambda);
        v
    }

    fn unflatten(v: &[f64], n_s: usize, n_a: usize, undiscounted: bool) -> DualVariables {
        let y = Array2::from_shape_vec((n_s, n_a), v[n_s..n_s + n_s * n_a].to_vec()).unwrap();
        DualVariables::from_tables(
            Array1::from(v[..n_s].to_vec()),
            &y,
            undiscounted.then(|| v[n_s + n_s * n_a]),
        )
        .unwrap()
    }

    #[test]
    fn exact_gradients_match_finite_differences() {
        for (undiscounted, alpha) in [(false, 1.0), (false, 2.0), (true, 0.5)] {
            let p = random_problem(7, 4, 3, 0.95, alpha, undiscounted);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let nu = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.2..2.0));
            let duals = DualVariables::from_tables(nu, &y, undiscounted.then_some(0.3)).unwrap();
            let g = ssp_gradients(&duals, &p).unwrap();
            let mut analytic: Vec<f64> = g.nu.to_vec();
            analytic.extend(g.y.iter());
            analytic.extend(g.lambda);
            let params = flatten(&duals);
            let coords: Vec<usize> = (0..params.len()).collect();
            let err = crate::nn::max_relative_gradient_error(
                |v| ssp_objective(&unflatten(v, 4, 3, undiscounted), &p, (1e-9, 1e9)).unwrap(),
                &params,
                &analytic,
                &coords,
                1e-5,
                1e-6,
            );
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn dual_value_examples() {
        let p = one_state(0.9, 0.0, 1.0);
        assert!(dual_value(&Array1::from_elem(1, -10.0), None, &p).unwrap().abs() < 1e-12);
        let p = random_problem(1, 3, 2, 0.9, 1.0, false);
        let zero_reward = ExactProblem {
            reward: Array2::zeros((3, 2)),
            ..p
        };
        assert!((dual_value(&Array1::zeros(3), None, &zero_reward).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(
            dual_value(&Array1::from_elem(3, -1e5), None, &zero_reward),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn closed_form_y_examples_and_conjugacy() {
        let p = one_state(0.9, 1.0, 1.0);
        assert!((closed_form_inner_y(&Array1::zeros(1), None, &p, (1e-6, 1e6)).unwrap()[[0, 0]] - 1.0).abs() < 1e-15);
        let p = one_state(0.9, 0.0, 1.0);
        assert!(
            (closed_form_inner_y(&Array1::zeros(1), None, &p, (1e-6, 1e6)).unwrap()[[0, 0]] - 0.36787944117144233)
                .abs()
                < 1e-15
        );
        for (undiscounted, alpha) in [(false, 1.0), (false, 0.5), (true, 2.0)] {
            let p = random_problem(21, 5, 3, 0.99, alpha, undiscounted);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            for _ in 0..20 {
                let nu = Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0));
                let lambda = undiscounted.then(|| rng.random_range(-1.0..1.0));
                let y = closed_form_inner_y(&nu, lambda, &p, (1e-12, 1e12)).unwrap();
                let duals = DualVariables::from_tables(nu.clone(), &y, lambda).unwrap();
                let f = ssp_objective(&duals, &p, (1e-12, 1e12)).unwrap();
                assert!((f - dual_value(&nu, lambda, &p).unwrap()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dual_is_convex_on_random_segments() {
        let p = random_problem(31, 5, 3, 0.99, 1.0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..1000 {
            let a = Array1::from_shape_fn(5, |_| rng.random_range(-5.0..5.0));
            let b = Array1::from_shape_fn(5, |_| rng.random_range(-5.0..5.0));
            let t: f64 = rng.random();
            let mid = &a * t + &b * (1.0 - t);
            let lhs = dual_value(&mid, None, &p).unwrap();
            let rhs = t * dual_value(&a, None, &p).unwrap() + (1.0 - t) * dual_value(&b, None, &p).unwrap();
            assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn one_state_solve() {
        let p = one_state(0.9, 0.0, 1.0);
        let (duals, diag) = solve_ssp(&p, &SspConfig::exact()).unwrap();
        assert!((duals.nu[0] + 10.0).abs() <= 0.1, "nu = {}", duals.nu[0]);
        assert!((duals.y()[[0, 0]] - 1.0).abs() <= 0.01);
        assert!(diag.converged);
    }

    #[test]
    fn one_state_undiscounted_solve() {
        let p = one_state(1.0, 0.0, 1.0);
        let mut cfg = SspConfig::exact();
        cfg.undiscounted = true;
        let (duals, _) = solve_undiscounted(&p, &cfg).unwrap();
        assert!((duals.lambda.unwrap() - 1.0).abs() < 1e-6);
        assert!((duals.y()[[0, 0]] - 1.0).abs() < 1e-6);
        assert_eq!(duals.nu[0], 0.0);
    }

    #[test]
    fn solver_reaches_first_order_conditions() {
        for (seed, undiscounted, alpha, gamma) in [
            (41, false, 1.0, 0.99),
            (42, false, 2.0, 0.9),
            (43, true, 0.5, 0.9),
            (44, false, 0.5, 0.99),
        ] {
            let p = random_problem(seed, 5, 3, gamma, alpha, undiscounted);
            let mut cfg = SspConfig::exact();
            cfg.undiscounted = undiscounted;
            let (duals, diag) = solve_ssp(&p, &cfg).unwrap();
            assert!(diag.converged, "seed {seed} took {} steps", diag.steps_taken);
            assert!(kkt_residual(&duals, &p, cfg.y_clip).unwrap() < 1e-4);
            let g = ssp_gradients(&duals, &p).unwrap();
            assert!(g.nu.iter().all(|v| v.abs() < 1e-5));
            let rho = optimal_occupancy(&duals, &p);
            let residual = crate::mdp::bellman_flow_residual(p.mdp(), &rho).unwrap();
            assert!(residual.iter().map(|x| x.abs()).sum::<f64>() < 1e-3);
            assert!((rho.sum() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn csv_export() {
        let p = one_state(0.9, 0.0, 1.0);
        let mut cfg = SspConfig::exact();
        cfg.reference_primal = Some(0.0);
        let (_, diag) = solve_ssp(&p, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        diag.export_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,objective,kkt_residual,gap\n"));
        assert_eq!(text.lines().count(), diag.iterations.len() + 1);
    }

    fn deterministic_dataset() -> (Dataset, TabularMdp) {
        // Deterministic two-state chain; every pair appears once.
        let mut t = Array3::zeros((2, 2, 2));
        t[[0, 0, 0]] = 1.0;
        t[[0, 1, 1]] = 1.0;
        t[[1, 0, 0]] = 1.0;
        t[[1, 1, 1]] = 1.0;
        let mdp = TabularMdp::new(t, Array1::from(vec![1.0, 0.0]), 0.9, None).unwrap();
        let ds = Dataset::new(vec![
            Transition::tabular(0, 0, 0, true, Source::Supplementary),
            Transition::tabular(0, 1, 1, false, Source::Supplementary),
            Transition::tabular(1, 0, 0, false, Source::Supplementary),
            Transition::tabular(1, 1, 1, false, Source::Supplementary),
        ]);
        (ds, mdp)
    }

    #[test]
    fn sampled_objective_equals_exact_on_deterministic_data() {
        let (ds, mdp) = deterministic_dataset();
        let reward = AuxiliaryReward::from_table(
            Array2::from_shape_vec((2, 2), vec![0.1, -0.3, 0.4, 0.2]).unwrap(),
            1.5,
            0.0,
        )
        .unwrap();
        let rho = EmpiricalDistribution::from_dataset(&ds, None, 2, 2, CountOptions::default()).unwrap();
        let p = ExactProblem::new(&mdp, &rho, &reward, false).unwrap();
        let y = Array2::from_shape_vec((2, 2), vec![0.5, 1.2, 0.8, 2.0]).unwrap();
        let duals = DualVariables::from_tables(Array1::from(vec![0.3, -0.7]), &y, None).unwrap();
        let batch: Vec<&Transition> = ds.transitions.iter().collect();
        let starts = vec![&ds.transitions[0].state];
        let sampled = sampled_objective(&duals, &batch, &starts, &reward, 0.9, (1e-6, 1e6)).unwrap();
        let exact = ssp_objective(&duals, &p, (1e-6, 1e6)).unwrap();
        assert!((sampled.objective - exact).abs() < 1e-14);
        let g = ssp_gradients(&duals, &p).unwrap();
        for (a, b) in sampled.grad_nu.iter().zip(g.nu.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for ((a, b), y) in sampled.grad_y.iter().zip(g.y.iter()).zip(y.iter()) {
            assert!((a - b * y).abs() < 1e-14);
        }
    }

    #[test]
    fn empirical_model_problem_matches_known_model() {
        let (ds, mdp) = deterministic_dataset();
        let reward = AuxiliaryReward::from_table(Array2::zeros((2, 2)), 1.0, 0.0).unwrap();
        let p = ExactProblem::from_dataset(&ds, &reward, 2, 2, 0.9, false).unwrap();
        assert_eq!(p.mdp().transition(), mdp.transition());
        assert_eq!(p.mdp().initial(), mdp.initial());
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let feat = Featurizer::OneHot {
            n_states: 3,
            n_actions: 2,
        };
        let mut model = NetworkDuals::new(feat, &[6], true, &mut rng);
        for p in model.log_y.params_mut() {
            *p = rng.random_range(-0.5..0.5);
        }
        model.lambda = Some(0.2);
        let transitions: Vec<Transition> = (0..12)
            .map(|i| Transition::tabular(i % 3, i % 2, (i + 1) % 3, i == 0, Source::Expert))
            .collect();
        let batch: Vec<&Transition> = transitions.iter().collect();
        let reward =
            AuxiliaryReward::from_table(Array2::from_shape_fn((3, 2), |(s, a)| 0.1 * (s + a) as f64), 1.0, 0.0)
                .unwrap();
        let starts = vec![&transitions[0].state];
        let eval = sampled_objective(&model, &batch, &starts, &reward, 0.9, (1e-6, 1e6)).unwrap();
        let coords = sample_all(model.nu.n_params());
        let base = model.clone();
        let err_nu = crate::nn::max_relative_gradient_error(
            |v| {
                let mut m = base.clone();
                m.nu.params_mut().copy_from_slice(v);
                sampled_objective(&m, &batch, &starts, &reward, 0.9, (1e-6, 1e6))
                    .unwrap()
                    .objective
            },
            base.nu.params(),
            &eval.grad_nu,
            &coords,
            1e-5,
            1e-6,
        );
        let err_y = crate::nn::max_relative_gradient_error(
            |v| {
                let mut m = base.clone();
                m.log_y.params_mut().copy_from_slice(v);
                sampled_objective(&m, &batch, &starts, &reward, 0.9, (1e-6, 1e6))
                    .unwrap()
                    .objective
            },
            base.log_y.params(),
            &eval.grad_y,
            &sample_all(base.log_y.n_params()),
            1e-5,
            1e-6,
        );
        assert!(err_nu <= 1e-4 && err_y <= 1e-4, "{err_nu} {err_y}");
    }

    fn sample_all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn sampled_solver_approaches_exact_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mdp = TabularMdp::random(3, 2, 0.9, &mut rng).unwrap();
        let behavior = TabularPolicy::uniform(3, 2);
        let ds = crate::data::sample_trajectories(&mdp, &behavior, 200, 30, 61, Source::Supplementary).unwrap();
        let reward =
            AuxiliaryReward::from_table(Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)), 1.0, 0.0)
                .unwrap();
        let p = ExactProblem::from_dataset(&ds, &reward, 3, 2, 0.9, false).unwrap();
        let (exact, _) = solve_ssp(&p, &SspConfig::exact()).unwrap();
        let mut model = DualVariables::initial(3, 2, false);
        let mut cfg = SspConfig::sampled();
        cfg.iterations = 20_000;
        cfg.lr_nu = 1e-2;
        cfg.lr_y = 1e-2;
        cfg.batch = 128;
        let diag = solve_ssp_sampled(&mut model, &ds, &reward, 0.9, &cfg).unwrap();
        assert_eq!(diag.steps_taken, 20_000);
        let l_exact = dual_value(&exact.nu, None, &p).unwrap();
        let l_sampled = dual_value(&model.nu, None, &p).unwrap();
        assert!(l_sampled - l_exact < 0.05, "{l_sampled} vs {l_exact}");
    }

    #[test]
    fn sampled_solver_is_deterministic() {
        let (ds, _) = deterministic_dataset();
        let reward = AuxiliaryReward::from_table(Array2::zeros((2, 2)), 1.0, 0.0).unwrap();
        let mut cfg = SspConfig::sampled();
        cfg.iterations = 50;
        let run = || {
            let mut m = DualVariables::initial(2, 2, false);
            solve_ssp_sampled(&mut m, &ds, &reward, 0.9, &cfg).unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
