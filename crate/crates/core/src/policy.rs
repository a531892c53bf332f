//! Policy extraction from the saddle-point solution, the behavior-cloning
//! baseline, and occupancy divergences.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmpiricalDistribution, Obs, Source, Transition};
use crate::error::{Error, Result};
use crate::mdp::{sample_index, stationary_distribution, TabularMdp, TabularPolicy};
use crate::nn::{self, Adam, GradientBuffer, Mlp};
use crate::reward::Featurizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    ClosedForm,
    WeightedBc,
    ReverseKl,
    PlainBc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub method: ExtractionMethod,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples per step; `None` uses the full dataset.
    pub batch: Option<usize>,
    /// Divide weights by their per-state mean (ablation only).
    pub normalize_per_state: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            method: ExtractionMethod::ClosedForm,
            steps: 10_000,
            lr: 1e-4,
            seed: 0,
            batch: Some(256),
            normalize_per_state: false,
        }
    }
}

impl ExtractionConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("gradient extraction needs at least one step"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch == Some(0) {
            return Err(Error::invalid("batch must be at least 1"));
        }
        Ok(())
    }
}

/// `pi(a|s) = rho_o(s,a) y(s,a) / z(s)`; rows with `z(s) = 0` are uniform.
pub fn extract_policy_closed_form(rho_o: &EmpiricalDistribution, y_star: &Array2<f64>) -> Result<TabularPolicy> {
    if rho_o.dim() != y_star.dim() {
        return Err(Error::shape(
            format!("{:?}", rho_o.dim()),
            format!("{:?}", y_star.dim()),
        ));
    }
    if y_star.iter().any(|&y| !(y > 0.0) || !y.is_finite()) {
        return Err(Error::invalid("y must be positive and finite"));
    }
    TabularPolicy::from_weights(&(rho_o.probs() * y_star))
}

fn per_state_means(data: &Dataset, weights: &[f64], n_states: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; n_states];
    let mut count = vec![0.0; n_states];
    for (t, w) in data.transitions.iter().zip(weights) {
        let s = t.state.index()?;
        sum[s] += w;
        count[s] += 1.0;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, c)| if *s > 0.0 { s / c } else { 1.0 })
        .collect())
}

fn transition_weights(data: &Dataset, weight: &dyn Fn(&Transition) -> Result<f64>) -> Result<Vec<f64>> {
    let weights = data.transitions.iter().map(weight).collect::<Result<Vec<f64>>>()?;
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("all weights are zero"));
    }
    Ok(weights)
}

/// Tabular optimum of `max_pi sum_i w_i log pi(a_i|s_i)`: per-state
/// normalized weight totals; unvisited states are uniform.
pub fn weighted_bc_tabular(
    data: &Dataset,
    weight: &dyn Fn(&Transition) -> Result<f64>,
    n_states: usize,
    n_actions: usize,
    normalize_per_state: bool,
) -> Result<TabularPolicy> {
    data.validate_tabular(n_states, n_actions)?;
    let mut weights = transition_weights(data, weight)?;
    if normalize_per_state {
        let means = per_state_means(data, &weights, n_states)?;
        for (w, t) in weights.iter_mut().zip(&data.transitions) {
            *w /= means[t.state.index()?];
        }
    }
    let mut totals = Array2::zeros((n_states, n_actions));
    for (t, w) in data.transitions.iter().zip(&weights) {
        totals[[t.state.index()?, t.action.index()?]] += w;
    }
    TabularPolicy::from_weights(&totals)
}

/// Weight function reading `y(s,a)` from a table.
pub fn table_weight(y: &Array2<f64>) -> impl Fn(&Transition) -> Result<f64> + '_ {
    move |t| {
        let (s, a) = (t.state.index()?, t.action.index()?);
        y.get((s, a))
            .copied()
            .ok_or_else(|| Error::invalid(format!("pair ({s}, {a}) out of range")))
    }
}

/// Maximum-likelihood cloning of the expert-tagged transitions.
pub fn plain_bc_tabular(data: &Dataset, n_states: usize, n_actions: usize) -> Result<TabularPolicy> {
    let expert = data.filter(Source::Expert);
    if expert.is_empty() {
        return Err(Error::Empty("no expert transitions".into()));
    }
    weighted_bc_tabular(&expert, &|_| Ok(1.0), n_states, n_actions, false)
}

/// Reverse-KL target `q = rho_e y (1/d - 1)`, equal to `rho_o y` for the
/// closed-form discriminator.
pub fn reverse_kl_target(rho_e: &EmpiricalDistribution, y_star: &Array2<f64>, d: &Array2<f64>) -> Result<Array2<f64>> {
    if rho_e.dim() != y_star.dim() || d.dim() != y_star.dim() {
        return Err(Error::shape(
            format!("{:?}", y_star.dim()),
            format!("{:?} / {:?}", rho_e.dim(), d.dim()),
        ));
    }
    Ok(Array2::from_shape_fn(y_star.dim(), |idx| {
        rho_e.probs()[idx] * y_star[idx] * (1.0 / d[idx] - 1.0)
    }))
}

/// Exact minimizer of `E_s KL(pi(.|s) || q(s,.)/z(s))`: `pi = q / z`.
/// Visited states need positive `q` mass; others are uniform.
pub fn extract_policy_reverse_kl_tabular(data: &Dataset, q: &Array2<f64>) -> Result<TabularPolicy> {
    let (n_s, n_a) = q.dim();
    data.validate_tabular(n_s, n_a)?;
    if q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("q must be finite and nonnegative"));
    }
    for t in &data.transitions {
        let s = t.state.index()?;
        if q.row(s).sum() <= 0.0 {
            return Err(Error::invalid(format!("q has no mass at visited state {s}")));
        }
    }
    TabularPolicy::from_weights(q)
}

/// `KL(rho^pi || target)`, `+inf` when `rho^pi` leaves the target support.
pub fn occupancy_divergence(mdp: &TabularMdp, policy: &TabularPolicy, target: &EmpiricalDistribution) -> Result<f64> {
    let rho = stationary_distribution(mdp, policy)?;
    if rho.table().dim() != target.dim() {
        return Err(Error::shape(
            format!("{:?}", rho.table().dim()),
            format!("{:?}", target.dim()),
        ));
    }
    Ok(kl_divergence(rho.table(), target.probs()))
}

/// `sum p log(p / q)`, `+inf` when `p > 0` where `q = 0`.
pub fn kl_divergence(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total.max(0.0)
}

fn policy_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Softmax policy over discrete actions with a network over state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    pub net: Mlp,
    pub featurizer: Featurizer,
}

impl CategoricalPolicy {
    pub fn new<R: Rng + ?Sized>(featurizer: Featurizer, n_actions: usize, hidden: &[usize], rng: &mut R) -> Self {
        let net = Mlp::new(&policy_sizes(featurizer.state_dim(), hidden, n_actions), rng);
        Self { net, featurizer }
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn log_probs(&self, s: &Obs) -> Result<Vec<f64>> {
        Ok(nn::log_softmax(&self.net.forward(&self.featurizer.state(s)?)?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &Obs, rng: &mut R) -> Result<usize> {
        let lp = self.log_probs(s)?;
        Ok(sample_index(lp.into_iter().map(f64::exp), rng))
    }

    /// Tabulates the policy over a one-hot state space.
    pub fn to_tabular(&self, n_states: usize) -> Result<TabularPolicy> {
        let mut probs = Array2::zeros((n_states, self.n_actions()));
        for s in 0..n_states {
            for (a, lp) in self.log_probs(&Obs::Index(s))?.into_iter().enumerate() {
                probs[[s, a]] = lp.exp();
            }
        }
        TabularPolicy::from_weights(&probs)
    }

    /// Adds `coef * d log pi(a|s) / d params` to `grads`.
    pub fn add_log_prob_grad(&self, s: &Obs, a: usize, coef: f64, grads: &mut GradientBuffer) -> Result<f64> {
        let trace = self.net.forward_trace(&self.featurizer.state(s)?)?;
        let lp = nn::log_softmax(trace.output());
        if a >= lp.len() {
            return Err(Error::invalid(format!("action {a} out of range")));
        }
        let upstream: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(k, l)| coef * (f64::from(u8::from(k == a)) - l.exp()))
            .collect();
        self.net.backward(&trace, &upstream, grads)?;
        Ok(lp[a])
    }
}

/// Tanh-squashed diagonal Gaussian over actions in `(-1, 1)^k`. The network
/// emits the mean followed by a raw (state-dependent) log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub featurizer: Featurizer,
    pub action_dim: usize,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(featurizer: Featurizer, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let net = Mlp::new(&policy_sizes(featurizer.state_dim(), hidden, 2 * action_dim), rng);
        Self {
            net,
            featurizer,
            action_dim,
        }
    }

    fn heads<'a>(&self, out: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        out.split_at(self.action_dim)
    }

    pub fn log_prob(&self, s: &Obs, action: &[f64]) -> Result<f64> {
        let out = self.net.forward(&self.featurizer.state(s)?)?;
        let (mean, raw) = self.heads(&out);
        Ok(nn::squashed_gaussian_log_prob(mean, raw, action)?.log_prob)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &Obs, rng: &mut R) -> Result<Vec<f64>> {
        let out = self.net.forward(&self.featurizer.state(s)?)?;
        let (mean, raw) = self.heads(&out);
        let eps: Vec<f64> = (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(nn::squashed_gaussian_rsample(mean, raw, &eps).action)
    }

    pub fn mean_action(&self, s: &Obs) -> Result<Vec<f64>> {
        let out = self.net.forward(&self.featurizer.state(s)?)?;
        Ok(out[..self.action_dim].iter().map(|m| m.tanh()).collect())
    }

    /// Adds `coef * d log pi(a|s) / d params` to `grads`.
    pub fn add_log_prob_grad(&self, s: &Obs, action: &[f64], coef: f64, grads: &mut GradientBuffer) -> Result<f64> {
        let trace = self.net.forward_trace(&self.featurizer.state(s)?)?;
        let (mean, raw) = self.heads(trace.output());
        let eval = nn::squashed_gaussian_log_prob(mean, raw, action)?;
        let upstream: Vec<f64> = eval
            .d_mean
            .iter()
            .chain(&eval.d_raw_log_std)
            .map(|g| coef * g)
            .collect();
        self.net.backward(&trace, &upstream, grads)?;
        Ok(eval.log_prob)
    }

    /// Adds `coef * d/dparams [log pi(a) - log q(s, a)]` at the
    /// reparameterized action `a(eps)`; returns that difference.
    pub fn add_reverse_kl_grad(
        &self,
        s: &Obs,
        eps: &[f64],
        log_q: &GaussianLogDensity,
        coef: f64,
        grads: &mut GradientBuffer,
    ) -> Result<f64> {
        let trace = self.net.forward_trace(&self.featurizer.state(s)?)?;
        let (mean, raw) = self.heads(trace.output());
        let draw = nn::squashed_gaussian_rsample(mean, raw, eps);
        let (lq, dq) = log_q(s, &draw.action)?;
        if dq.len() != self.action_dim {
            return Err(Error::shape(self.action_dim, dq.len()));
        }
        let mut upstream = vec![0.0; 2 * self.action_dim];
        for i in 0..self.action_dim {
            upstream[i] = coef * (draw.dlogp_d_mean[i] - dq[i] * draw.da_d_mean[i]);
            upstream[self.action_dim + i] = coef * (draw.dlogp_d_raw[i] - dq[i] * draw.da_d_raw[i]);
        }
        self.net.backward(&trace, &upstream, grads)?;
        Ok(draw.log_prob - lq)
    }
}

/// Parametric policy over discrete or continuous actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyArtifact {
    Tabular { rows: Vec<Vec<f64>> },
    Categorical(CategoricalPolicy),
    Gaussian(GaussianPolicy),
}

impl PolicyArtifact {
    pub fn tabular(policy: &TabularPolicy) -> Self {
        PolicyArtifact::Tabular { rows: policy.to_rows() }
    }

    pub fn to_tabular(&self, n_states: usize) -> Result<TabularPolicy> {
        match self {
            PolicyArtifact::Tabular { rows } => {
                let n_a = rows.first().map_or(0, Vec::len);
                TabularPolicy::new(crate::mdp::rows_to_table(rows, n_a)?)
            }
            PolicyArtifact::Categorical(p) => p.to_tabular(n_states),
            PolicyArtifact::Gaussian(_) => Err(Error::invalid("continuous-action policy has no table")),
        }
    }
}

fn draw_batch<'a>(
    items: &'a [(usize, &'a Transition)],
    batch: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, &'a Transition)> {
    match batch {
        Some(b) => (0..b).map(|_| *items.choose(rng).unwrap()).collect(),
        None => items.to_vec(),
    }
}

fn weighted_items<'a>(data: &'a Dataset, weights: &[f64]) -> Vec<(usize, &'a Transition)> {
    data.transitions
        .iter()
        .enumerate()
        .filter(|(i, _)| weights[*i] > 0.0)
        .collect()
}

fn check_weights_len(data: &Dataset, weights: &[f64]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("extraction dataset is empty".into()));
    }
    if weights.len() != data.len() {
        return Err(Error::shape(data.len(), weights.len()));
    }
    Ok(())
}

/// Mean of `-w_i log pi(a_i|s_i)` over `items`, and its parameter gradient.
pub fn weighted_nll_categorical(
    policy: &CategoricalPolicy,
    items: &[(f64, &Transition)],
) -> Result<(f64, GradientBuffer)> {
    let mut grads = policy.net.zero_grad();
    let inv = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    for (w, t) in items {
        let lp = policy.add_log_prob_grad(&t.state, t.action.index()?, -w * inv, &mut grads)?;
        loss -= w * inv * lp;
    }
    Ok((loss, grads))
}

/// Mean of `-w_i log pi(a_i|s_i)` for vector actions, and its gradient.
pub fn weighted_nll_gaussian(policy: &GaussianPolicy, items: &[(f64, &Transition)]) -> Result<(f64, GradientBuffer)> {
    let mut grads = policy.net.zero_grad();
    let inv = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    for (w, t) in items {
        let action = match &t.action {
            Obs::Vector(v) => v,
            Obs::Index(_) => return Err(Error::invalid("gaussian policy needs vector actions")),
        };
        let lp = policy.add_log_prob_grad(&t.state, action, -w * inv, &mut grads)?;
        loss -= w * inv * lp;
    }
    Ok((loss, grads))
}

fn optimize(
    params: &mut [f64],
    cfg: &ExtractionConfig,
    mut loss_and_grad: impl FnMut(&mut ChaCha8Rng, &[f64]) -> Result<(f64, GradientBuffer)>,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = loss_and_grad(&mut rng, params)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                context: "policy extraction loss".into(),
                step,
            });
        }
        losses.push(loss);
        adam.step(params, &grads.0)?;
    }
    Ok(losses)
}

/// Weighted behavior cloning by gradient steps; returns the loss trace.
/// Zero-weight transitions never enter a batch.
pub fn weighted_bc_categorical(
    policy: &mut CategoricalPolicy,
    data: &Dataset,
    weight: &dyn Fn(&Transition) -> Result<f64>,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let weights = scaled_weights(data, weight, cfg)?;
    let items = weighted_items(data, &weights);
    let mut params = policy.net.params().to_vec();
    let losses = optimize(&mut params, cfg, |rng, p| {
        policy.net.params_mut().copy_from_slice(p);
        let batch: Vec<(f64, &Transition)> = draw_batch(&items, cfg.batch, rng)
            .into_iter()
            .map(|(i, t)| (weights[i], t))
            .collect();
        weighted_nll_categorical(policy, &batch)
    })?;
    policy.net.params_mut().copy_from_slice(&params);
    Ok(losses)
}

/// Weighted behavior cloning of a squashed-Gaussian policy.
pub fn weighted_bc_gaussian(
    policy: &mut GaussianPolicy,
    data: &Dataset,
    weight: &dyn Fn(&Transition) -> Result<f64>,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let weights = scaled_weights(data, weight, cfg)?;
    let items = weighted_items(data, &weights);
    let mut params = policy.net.params().to_vec();
    let losses = optimize(&mut params, cfg, |rng, p| {
        policy.net.params_mut().copy_from_slice(p);
        let batch: Vec<(f64, &Transition)> = draw_batch(&items, cfg.batch, rng)
            .into_iter()
            .map(|(i, t)| (weights[i], t))
            .collect();
        weighted_nll_gaussian(policy, &batch)
    })?;
    policy.net.params_mut().copy_from_slice(&params);
    Ok(losses)
}

fn scaled_weights(
    data: &Dataset,
    weight: &dyn Fn(&Transition) -> Result<f64>,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    let mut weights = transition_weights(data, weight)?;
    check_weights_len(data, &weights)?;
    if cfg.normalize_per_state {
        let n_states = data
            .transitions
            .iter()
            .map(|t| t.state.index())
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0)
            + 1;
        let means = per_state_means(data, &weights, n_states)?;
        for (w, t) in weights.iter_mut().zip(&data.transitions) {
            *w /= means[t.state.index()?];
        }
    }
    Ok(weights)
}

/// Plain behavior cloning of the expert transitions.
pub fn plain_bc_categorical(
    policy: &mut CategoricalPolicy,
    data: &Dataset,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    let expert = data.filter(Source::Expert);
    if expert.is_empty() {
        return Err(Error::Empty("no expert transitions".into()));
    }
    weighted_bc_categorical(policy, &expert, &|_| Ok(1.0), cfg)
}

/// Mean over states of `KL(pi(.|s) || q(s,.)/z(s))` up to the constant
/// `log z(s)`, with its gradient. `log_q` returns one entry per action.
pub fn reverse_kl_categorical_loss(
    policy: &CategoricalPolicy,
    states: &[&Obs],
    log_q: &dyn Fn(&Obs) -> Result<Vec<f64>>,
) -> Result<(f64, GradientBuffer)> {
    let mut grads = policy.net.zero_grad();
    let inv = 1.0 / states.len() as f64;
    let mut loss = 0.0;
    for s in states {
        let trace = policy.net.forward_trace(&policy.featurizer.state(s)?)?;
        let lp = nn::log_softmax(trace.output());
        let lq = log_q(s)?;
        if lq.len() != lp.len() {
            return Err(Error::shape(lp.len(), lq.len()));
        }
        let mut kl = 0.0;
        for k in 0..lp.len() {
            let p = lp[k].exp();
            if p > 0.0 {
                kl += p * (lp[k] - lq[k]);
            }
        }
        let upstream: Vec<f64> = (0..lp.len())
            .map(|k| {
                let p = lp[k].exp();
                if p > 0.0 {
                    inv * p * (lp[k] - lq[k] - kl)
                } else {
                    0.0
                }
            })
            .collect();
        policy.net.backward(&trace, &upstream, &mut grads)?;
        loss += inv * kl;
    }
    Ok((loss, grads))
}

/// Reverse-KL extraction for discrete actions over the dataset states.
pub fn reverse_kl_categorical(
    policy: &mut CategoricalPolicy,
    data: &Dataset,
    log_q: &dyn Fn(&Obs) -> Result<Vec<f64>>,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("extraction dataset is empty".into()));
    }
    let items: Vec<(usize, &Transition)> = data.transitions.iter().enumerate().collect();
    let mut params = policy.net.params().to_vec();
    let losses = optimize(&mut params, cfg, |rng, p| {
        policy.net.params_mut().copy_from_slice(p);
        let states: Vec<&Obs> = draw_batch(&items, cfg.batch, rng)
            .into_iter()
            .map(|(_, t)| &t.state)
            .collect();
        reverse_kl_categorical_loss(policy, &states, log_q)
    })?;
    policy.net.params_mut().copy_from_slice(&params);
    Ok(losses)
}

/// Reparameterized estimate of `E_s E_a~pi[log pi(a|s) - log q(s,a)]` for
/// fixed noise draws, with its gradient. `log_q` returns the value and its
/// gradient in the action.
/// Target log-density `log q(s, a)` and its gradient in the action.
pub type GaussianLogDensity = dyn Fn(&Obs, &[f64]) -> Result<(f64, Vec<f64>)>;

pub fn reverse_kl_gaussian_loss(
    policy: &GaussianPolicy,
    samples: &[(&Obs, Vec<f64>)],
    log_q: &GaussianLogDensity,
) -> Result<(f64, GradientBuffer)> {
    let mut grads = policy.net.zero_grad();
    let inv = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    for (s, eps) in samples {
        loss += inv * policy.add_reverse_kl_grad(s, eps, log_q, inv, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Reverse-KL extraction for continuous actions; the normalizer `z(s)` is
/// dropped since it does not depend on the policy.
pub fn reverse_kl_gaussian(
    policy: &mut GaussianPolicy,
    data: &Dataset,
    log_q: &GaussianLogDensity,
    cfg: &ExtractionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("extraction dataset is empty".into()));
    }
    let items: Vec<(usize, &Transition)> = data.transitions.iter().enumerate().collect();
    let k = policy.action_dim;
    let mut params = policy.net.params().to_vec();
    let losses = optimize(&mut params, cfg, |rng, p| {
        policy.net.params_mut().copy_from_slice(p);
        let batch = draw_batch(&items, cfg.batch, rng);
        let samples: Vec<(&Obs, Vec<f64>)> = batch
            .into_iter()
            .map(|(_, t)| (&t.state, (0..k).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        reverse_kl_gaussian_loss(policy, &samples, log_q)
    })?;
    policy.net.params_mut().copy_from_slice(&params);
    Ok(losses)
}
