//! Density-ratio discriminator `d(s,a)` between expert and union data and the
//! auxiliary reward `log(d / (1 - d))` derived from it.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmpiricalDistribution, Obs};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, GradientBuffer, Mlp};

/// Output range for discriminator probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self { lo: 0.1, hi: 0.9 }
    }
}

impl ClipBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::invalid(format!(
                "clip bounds [{lo}, {hi}] must satisfy 0 < lo < hi < 1"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

/// Maps a `(state, action)` pair to network input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Featurizer {
    /// One-hot state concatenated with one-hot action.
    OneHot { n_states: usize, n_actions: usize },
    /// Raw vectors concatenated; a tabular action becomes a one-hot block of
    /// width `n_actions` (0 when actions are vectors).
    Concat {
        state_dim: usize,
        action_dim: usize,
        n_actions: usize,
    },
}

impl Featurizer {
    pub fn state_dim(&self) -> usize {
        match self {
            Featurizer::OneHot { n_states, .. } => *n_states,
            Featurizer::Concat { state_dim, .. } => *state_dim,
        }
    }

    pub fn pair_dim(&self) -> usize {
        match self {
            Featurizer::OneHot { n_states, n_actions } => n_states + n_actions,
            Featurizer::Concat {
                state_dim,
                action_dim,
                n_actions,
            } => state_dim + if *n_actions > 0 { *n_actions } else { *action_dim },
        }
    }

    pub fn state(&self, s: &Obs) -> Result<Vec<f64>> {
        match (self, s) {
            (Featurizer::OneHot { n_states, .. }, Obs::Index(i)) if i < n_states => Ok(one_hot(*i, *n_states)),
            (Featurizer::Concat { state_dim, .. }, Obs::Vector(v)) if v.len() == *state_dim => Ok(v.clone()),
            _ => Err(Error::invalid(format!("state {s:?} does not fit featurizer {self:?}"))),
        }
    }

    pub fn pair(&self, s: &Obs, a: &Obs) -> Result<Vec<f64>> {
        let mut x = self.state(s)?;
        match (self, a) {
            (Featurizer::OneHot { n_actions, .. }, Obs::Index(i))
            | (Featurizer::Concat { n_actions, .. }, Obs::Index(i))
                if i < n_actions =>
            {
                x.extend(one_hot(*i, *n_actions))
            }
            (
                Featurizer::Concat {
                    action_dim,
                    n_actions: 0,
                    ..
                },
                Obs::Vector(v),
            ) if v.len() == *action_dim => x.extend_from_slice(v),
            _ => return Err(Error::invalid(format!("action {a:?} does not fit featurizer {self:?}"))),
        }
        Ok(x)
    }
}

pub(crate) fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Discriminator between expert and union state-action distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityDiscriminator {
    /// Closed-form values; pairs outside both supports are undefined and
    /// evaluate at the lower clip bound.
    Tabular {
        values: Array2<f64>,
        defined: Array2<bool>,
        clip: ClipBounds,
    },
    /// Network emitting a pre-sigmoid logit.
    Network {
        net: Mlp,
        featurizer: Featurizer,
        clip: ClipBounds,
    },
}

impl DensityDiscriminator {
    pub fn clip(&self) -> ClipBounds {
        match self {
            DensityDiscriminator::Tabular { clip, .. } | DensityDiscriminator::Network { clip, .. } => *clip,
        }
    }

    pub fn with_clip(mut self, bounds: ClipBounds) -> Self {
        match &mut self {
            DensityDiscriminator::Tabular { clip, .. } | DensityDiscriminator::Network { clip, .. } => *clip = bounds,
        }
        self
    }

    /// Raw (unclipped) probability.
    pub fn raw_prob(&self, s: &Obs, a: &Obs) -> Result<f64> {
        match self {
            DensityDiscriminator::Tabular { values, defined, clip } => {
                let (s, a) = (s.index()?, a.index()?);
                if s >= values.nrows() || a >= values.ncols() {
                    return Err(Error::invalid(format!("pair ({s}, {a}) out of range")));
                }
                Ok(if defined[[s, a]] { values[[s, a]] } else { clip.lo })
            }
            DensityDiscriminator::Network { net, featurizer, .. } => {
                Ok(nn::sigmoid(net.forward(&featurizer.pair(s, a)?)?[0]))
            }
        }
    }

    pub fn prob(&self, s: &Obs, a: &Obs) -> Result<f64> {
        Ok(self.clip().apply(self.raw_prob(s, a)?))
    }

    /// Clipped probabilities over a tabular space.
    pub fn table(&self, n_states: usize, n_actions: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for a in 0..n_actions {
                out[[s, a]] = self.prob(&Obs::Index(s), &Obs::Index(a))?;
            }
        }
        Ok(out)
    }

    /// Writes `s,a,d` rows for a tabular space.
    pub fn export_csv(&self, n_states: usize, n_actions: usize, path: &Path) -> Result<()> {
        let table = self.table(n_states, n_actions)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "s,a,d")?;
        for ((s, a), d) in table.indexed_iter() {
            writeln!(out, "{s},{a},{d}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Optimal discriminator `rho_e / (rho_e + rho_o)` computed from counts.
pub fn fit_discriminator_closed_form(
    rho_e: &EmpiricalDistribution,
    rho_o: &EmpiricalDistribution,
) -> Result<DensityDiscriminator> {
    if rho_e.dim() != rho_o.dim() {
        return Err(Error::shape(format!("{:?}", rho_e.dim()), format!("{:?}", rho_o.dim())));
    }
    let mut values = Array2::zeros(rho_e.dim());
    let mut defined = Array2::from_elem(rho_e.dim(), false);
    for ((s, a), &pe) in rho_e.probs().indexed_iter() {
        let denom = pe + rho_o.get(s, a);
        if denom > 0.0 {
            values[[s, a]] = pe / denom;
            defined[[s, a]] = true;
        }
    }
    Ok(DensityDiscriminator::Tabular {
        values,
        defined,
        clip: ClipBounds::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Mini-batch size per side; `None` uses every sample each step.
    pub batch: Option<usize>,
    pub hidden: Vec<usize>,
    pub featurizer: Featurizer,
    pub clip: ClipBounds,
    pub optimizer: OptimizerKind,
}

impl LogisticConfig {
    pub fn new(featurizer: Featurizer) -> Self {
        Self {
            steps: 5000,
            lr: 1e-5,
            seed: 0,
            batch: Some(256),
            hidden: vec![256, 256],
            featurizer,
            clip: ClipBounds::default(),
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Negative of `E_e[log d] + E_o[log(1 - d)]` and its parameter gradient.
pub fn logistic_loss_and_grad(net: &Mlp, expert: &[Vec<f64>], union: &[Vec<f64>]) -> Result<(f64, GradientBuffer)> {
    let mut grads = net.zero_grad();
    let mut loss = 0.0;
    let (ne, no) = (expert.len() as f64, union.len() as f64);
    for x in expert {
        let trace = net.forward_trace(x)?;
        let z = trace.output()[0];
        loss += nn::softplus(-z) / ne;
        net.backward(&trace, &[-(1.0 - nn::sigmoid(z)) / ne], &mut grads)?;
    }
    for x in union {
        let trace = net.forward_trace(x)?;
        let z = trace.output()[0];
        loss += nn::softplus(z) / no;
        net.backward(&trace, &[nn::sigmoid(z) / no], &mut grads)?;
    }
    Ok((loss, grads))
}

/// Trained discriminator plus the loss observed at every step.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub discriminator: DensityDiscriminator,
    pub losses: Vec<f64>,
}

/// Maximizes `E_e[log d] + E_o[log(1 - d)]` by gradient steps on a network.
pub fn fit_discriminator_logistic(expert: &Dataset, union: &Dataset, cfg: &LogisticConfig) -> Result<LogisticFit> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if expert.is_empty() || union.is_empty() {
        return Err(Error::Empty(
            "discriminator training needs expert and union samples".into(),
        ));
    }
    let feats = |ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        ds.transitions
            .iter()
            .map(|t| cfg.featurizer.pair(&t.state, &t.action))
            .collect()
    };
    let (xe, xo) = (feats(expert)?, feats(union)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = vec![cfg.featurizer.pair_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = Mlp::new(&sizes, &mut rng);
    let mut adam = Adam::new(net.n_params(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = match cfg.batch {
            Some(b) => {
                let be: Vec<Vec<f64>> = (0..b).map(|_| xe.choose(&mut rng).unwrap().clone()).collect();
                let bo: Vec<Vec<f64>> = (0..b).map(|_| xo.choose(&mut rng).unwrap().clone()).collect();
                logistic_loss_and_grad(&net, &be, &bo)?
            }
            None => logistic_loss_and_grad(&net, &xe, &xo)?,
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                context: "discriminator loss".into(),
                step,
            });
        }
        losses.push(loss);
        match cfg.optimizer {
            OptimizerKind::Adam => adam.step(net.params_mut(), &grads.0)?,
            OptimizerKind::Sgd => {
                for (p, g) in net.params_mut().iter_mut().zip(&grads.0) {
                    *p -= cfg.lr * g;
                }
            }
        }
    }
    Ok(LogisticFit {
        discriminator: DensityDiscriminator::Network {
            net,
            featurizer: cfg.featurizer.clone(),
            clip: cfg.clip,
        },
        losses,
    })
}

/// Scaled auxiliary reward `alpha * log(d / (1 - d)) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryReward {
    kind: RewardKind,
    alpha: f64,
    beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum RewardKind {
    Table(Array2<f64>),
    Model(DensityDiscriminator),
}

impl AuxiliaryReward {
    /// Wraps an already-scaled reward table.
    pub fn from_table(values: Array2<f64>, alpha: f64, beta: f64) -> Result<Self> {
        check_scale(alpha, beta)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("reward table has non-finite entries"));
        }
        Ok(Self {
            kind: RewardKind::Table(values),
            alpha,
            beta,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Materialized table, present in tabular mode.
    pub fn table(&self) -> Option<&Array2<f64>> {
        match &self.kind {
            RewardKind::Table(t) => Some(t),
            RewardKind::Model(_) => None,
        }
    }

    pub fn table_or_err(&self) -> Result<&Array2<f64>> {
        self.table().ok_or_else(|| Error::invalid("reward is not tabular"))
    }

    pub fn value(&self, s: &Obs, a: &Obs) -> Result<f64> {
        match &self.kind {
            RewardKind::Table(t) => {
                let (s, a) = (s.index()?, a.index()?);
                t.get((s, a))
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("pair ({s}, {a}) out of range")))
            }
            RewardKind::Model(d) => Ok(scaled_log_ratio(d.prob(s, a)?, self.alpha, self.beta)),
        }
    }
}

fn check_scale(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0) || !(beta >= 0.0) {
        return Err(Error::invalid(format!(
            "need alpha > 0 and beta >= 0, got {alpha}, {beta}"
        )));
    }
    Ok(())
}

fn scaled_log_ratio(d: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (d / (1.0 - d)).ln() + beta
}

/// `alpha * log(d / (1 - d)) + beta` with clipped `d`.
pub fn auxiliary_reward(
    d: &DensityDiscriminator,
    n_states: usize,
    n_actions: usize,
    alpha: f64,
    beta: f64,
) -> Result<AuxiliaryReward> {
    check_scale(alpha, beta)?;
    let kind = match d {
        DensityDiscriminator::Tabular { .. } => {
            RewardKind::Table(d.table(n_states, n_actions)?.mapv(|p| scaled_log_ratio(p, alpha, beta)))
        }
        DensityDiscriminator::Network { .. } => RewardKind::Model(d.clone()),
    };
    Ok(AuxiliaryReward { kind, alpha, beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountOptions, Source, Transition};
    use rand::Rng;

    fn dist(table: Vec<f64>, n_a: usize) -> EmpiricalDistribution {
        let n_s = table.len() / n_a;
        EmpiricalDistribution::from_table(Array2::from_shape_vec((n_s, n_a), table).unwrap()).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let e = dist(vec![0.2, 0.3, 0.5, 0.0], 2);
        let o = dist(vec![0.4, 0.3, 0.3, 0.0], 2);
        let d = fit_discriminator_closed_form(&e, &o).unwrap();
        let p = |s, a| d.raw_prob(&Obs::Index(s), &Obs::Index(a)).unwrap();
        assert!((p(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p(0, 1), 0.5);
        assert_eq!(p(1, 1), 0.1);
    }

    #[test]
    fn closed_form_log_odds_is_log_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = EmpiricalDistribution::from_table(Array2::from_shape_fn((4, 3), |_| rng.random::<f64>())).unwrap();
        let o = EmpiricalDistribution::from_table(Array2::from_shape_fn((4, 3), |_| rng.random::<f64>())).unwrap();
        let d = fit_discriminator_closed_form(&e, &o).unwrap();
        for ((s, a), &pe) in e.probs().indexed_iter() {
            let p = d.raw_prob(&Obs::Index(s), &Obs::Index(a)).unwrap();
            assert!(((p / (1.0 - p)).ln() - (pe / o.get(s, a)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_formula() {
        let table = |p: f64| DensityDiscriminator::Tabular {
            values: Array2::from_elem((1, 1), p),
            defined: Array2::from_elem((1, 1), true),
            clip: ClipBounds::default(),
        };
        let r = |p, alpha, beta| auxiliary_reward(&table(p), 1, 1, alpha, beta).unwrap().table().unwrap()[[0, 0]];
        assert_eq!(r(0.5, 1.0, 0.0), 0.0);
        assert!((r(0.9, 1.0, 0.0) - 9f64.ln()).abs() < 1e-12);
        assert!((r(0.5, 2.0, 1.0) - 1.0).abs() < 1e-15);
        // Clipping bounds the reward.
        assert!((r(0.999, 1.0, 0.0) - 9f64.ln()).abs() < 1e-12);
        assert!(auxiliary_reward(&table(0.5), 1, 1, 0.0, 0.0).is_err());
        assert!(auxiliary_reward(&table(0.5), 1, 1, 1.0, -1.0).is_err());
    }

    #[test]
    fn scaled_reward_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = EmpiricalDistribution::from_table(Array2::from_shape_fn((3, 2), |_| rng.random::<f64>())).unwrap();
        let o = EmpiricalDistribution::from_table(Array2::from_shape_fn((3, 2), |_| rng.random::<f64>())).unwrap();
        let d = fit_discriminator_closed_form(&e, &o).unwrap();
        let base = auxiliary_reward(&d, 3, 2, 1.0, 0.0).unwrap();
        let scaled = auxiliary_reward(&d, 3, 2, 2.5, 0.7).unwrap();
        for (x, y) in base.table().unwrap().iter().zip(scaled.table().unwrap()) {
            assert!((2.5 * x + 0.7 - y).abs() < 1e-12);
        }
    }

    fn two_state_data(seed: u64, n: usize, expert_bias: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(
            (0..n)
                .map(|i| {
                    let s = usize::from(rng.random::<f64>() < 0.5);
                    let a = usize::from(rng.random::<f64>() < expert_bias);
                    Transition::tabular(s, a, s, i == 0, Source::Expert)
                })
                .collect(),
        )
    }

    #[test]
    fn logistic_matches_closed_form_on_one_hot_features() {
        let expert = two_state_data(1, 4000, 0.8);
        let supp = two_state_data(2, 4000, 0.3);
        let union = crate::data::merge_datasets(&expert, &supp).unwrap();
        let mut cfg = LogisticConfig::new(Featurizer::OneHot {
            n_states: 2,
            n_actions: 2,
        });
        cfg.hidden = vec![16];
        cfg.lr = 1e-2;
        cfg.steps = 3000;
        let fit = fit_discriminator_logistic(&expert, &union, &cfg).unwrap();
        let re = EmpiricalDistribution::from_dataset(&expert, None, 2, 2, CountOptions::default()).unwrap();
        let ro = EmpiricalDistribution::from_dataset(&union, None, 2, 2, CountOptions::default()).unwrap();
        let exact = fit_discriminator_closed_form(&re, &ro).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let (x, y) = (Obs::Index(s), Obs::Index(a));
                let diff = (fit.discriminator.prob(&x, &y).unwrap() - exact.prob(&x, &y).unwrap()).abs();
                assert!(diff <= 0.02, "pair ({s},{a}) off by {diff}");
            }
        }
    }

    #[test]
    fn logistic_on_matched_data_is_half() {
        let a = two_state_data(3, 3000, 0.5);
        let mut cfg = LogisticConfig::new(Featurizer::OneHot {
            n_states: 2,
            n_actions: 2,
        });
        cfg.hidden = vec![8];
        cfg.lr = 1e-2;
        cfg.steps = 1500;
        let fit = fit_discriminator_logistic(&a, &a, &cfg).unwrap();
        for s in 0..2 {
            for act in 0..2 {
                let p = fit.discriminator.prob(&Obs::Index(s), &Obs::Index(act)).unwrap();
                assert!((p - 0.5).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let expert = two_state_data(4, 500, 0.9);
        let union = crate::data::merge_datasets(&expert, &two_state_data(5, 500, 0.2)).unwrap();
        let mut cfg = LogisticConfig::new(Featurizer::OneHot {
            n_states: 2,
            n_actions: 2,
        });
        cfg.hidden = vec![];
        cfg.batch = None;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.lr = 0.05;
        cfg.steps = 300;
        let fit = fit_discriminator_logistic(&expert, &union, &cfg).unwrap();
        assert!(fit.losses.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn divergence_reports_step() {
        let expert = two_state_data(6, 50, 0.9);
        let mut cfg = LogisticConfig::new(Featurizer::OneHot {
            n_states: 2,
            n_actions: 2,
        });
        cfg.hidden = vec![4];
        cfg.batch = None;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.lr = f64::INFINITY;
        cfg.steps = 10;
        let err = fit_discriminator_logistic(&expert, &expert, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step, .. } if step >= 1));
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(
            LogisticConfig::new(Featurizer::OneHot {
                n_states: 1,
                n_actions: 1
            })
            .lr,
            1e-5
        );
    }
}
