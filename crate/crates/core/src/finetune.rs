//! Adversarial online finetuning on tabular MDPs and the discriminator
//! initialization experiment.
//!
//! The discriminator `D(s,a)` scores the probability that a pair came from
//! the current policy: it maximizes `E_pi[log D] + E_expert[log(1 - D)]`
//! while the policy minimizes `E_pi[log D]`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountOptions, Dataset, EmpiricalDistribution, Obs};
use crate::error::{Error, Result};
use crate::mdp::{policy_return, sample_index, TabularMdp, TabularPolicy};
use crate::nn;
use crate::policy::occupancy_divergence;
use crate::stitch::StitchedDiscriminator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInit {
    Stitched,
    Random,
    Table,
}

/// Per-step policy reward derived from `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyReward {
    /// `-log D`
    #[default]
    NegLogD,
    /// `log(1 - D)`
    LogOneMinusD,
}

/// Scaling of the tabular score-function gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScaling {
    /// Plain batch average over episodes.
    #[default]
    Batch,
    /// Policy: each state's row divided by its visit frequency in the batch.
    /// Logit-table discriminator: each cell divided by its batch mass. Rarely
    /// visited entries then move as fast as frequent ones.
    PerVisit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GailConfig {
    /// Environment episodes available in total.
    pub episodes: usize,
    pub horizon: usize,
    /// Episodes rolled out per iteration; the baseline needs at least two.
    pub rollouts_per_iter: usize,
    pub disc_steps_per_iter: usize,
    pub policy_steps_per_iter: usize,
    pub lr_disc: f64,
    pub lr_policy: f64,
    pub seed: u64,
    pub disc_init: DiscInit,
    pub reward: PolicyReward,
    pub policy_scaling: GradientScaling,
    /// Only affects logit-table discriminators.
    pub disc_scaling: GradientScaling,
    /// Discount of the reward-to-go in the policy step; the MDP's when `None`.
    pub credit_discount: Option<f64>,
    /// Floor applied to initial policy probabilities before taking logs.
    pub prob_floor: f64,
}

impl Default for GailConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            horizon: 40,
            rollouts_per_iter: 4,
            disc_steps_per_iter: 1,
            policy_steps_per_iter: 1,
            lr_disc: 1e-5,
            lr_policy: 1e-4,
            seed: 0,
            disc_init: DiscInit::Stitched,
            reward: PolicyReward::NegLogD,
            policy_scaling: GradientScaling::Batch,
            disc_scaling: GradientScaling::Batch,
            credit_discount: None,
            prob_floor: 1e-6,
        }
    }
}

impl GailConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.horizon == 0 || self.disc_steps_per_iter == 0 || self.policy_steps_per_iter == 0 {
            return Err(Error::invalid("episode, horizon and step counts must be positive"));
        }
        if self.rollouts_per_iter < 2 {
            return Err(Error::invalid(
                "rollouts_per_iter must be at least 2 for the mean-return baseline",
            ));
        }
        if !(self.lr_disc > 0.0) || !(self.lr_policy > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.credit_discount.is_some_and(|g| !(0.0..=1.0).contains(&g)) {
            return Err(Error::invalid("credit_discount must lie in [0, 1]"));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(Error::invalid("prob_floor must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episodes: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn push(&mut self, episodes: usize, metric: &str, value: f64) -> Result<()> {
        if let Some(last) = self.points.last() {
            if episodes < last.episodes {
                return Err(Error::invalid("episode counter went backwards"));
            }
        }
        self.points.push(CurvePoint {
            episodes,
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    pub fn series(&self, metric: &str) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter(|p| p.metric == metric)
            .map(|p| (p.episodes, p.value))
            .collect()
    }

    /// First episode count at which `metric` reaches `threshold`.
    pub fn first_reaching(&self, metric: &str, threshold: f64) -> Option<usize> {
        self.series(metric)
            .into_iter()
            .find(|(_, v)| *v >= threshold)
            .map(|(e, _)| e)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "episodes,metric,value")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.episodes, p.metric, p.value)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut curve = LearningCurve::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let episodes = fields[0].parse().map_err(|e| parse_err(format!("{e}")))?;
            let value = fields[2].parse().map_err(|e| parse_err(format!("{e}")))?;
            curve.push(episodes, fields[1], value)?;
        }
        Ok(curve)
    }
}

/// Softmax policy over a logit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub logits: Array2<f64>,
}

impl SoftmaxPolicy {
    pub fn from_policy(policy: &TabularPolicy, floor: f64) -> Self {
        Self {
            logits: policy.probs().mapv(|p| p.max(floor).ln()),
        }
    }

    pub fn probs(&self) -> TabularPolicy {
        TabularPolicy::softmax(&self.logits)
    }
}

/// Trainable discriminator for the tabular loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GailDiscriminator {
    /// Free logit per pair.
    Logits { logits: Array2<f64> },
    /// Two stitched networks updated jointly through one logit.
    Stitched(StitchedDiscriminator),
}

impl GailDiscriminator {
    /// Materializes a stitched discriminator as a logit table, or keeps its
    /// networks when both parts are trainable.
    pub fn from_stitched(stitched: &StitchedDiscriminator, n_states: usize, n_actions: usize) -> Result<Self> {
        if stitched.trainable {
            Ok(GailDiscriminator::Stitched(stitched.clone()))
        } else {
            Ok(GailDiscriminator::Logits {
                logits: stitched.logit_table(n_states, n_actions)?,
            })
        }
    }

    /// Logits drawn uniformly from `[-2, 2]`.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GailDiscriminator::Logits {
            logits: Array2::from_shape_fn((n_states, n_actions), |_| rng.random_range(-2.0..2.0)),
        }
    }

    pub fn logit(&self, s: usize, a: usize) -> Result<f64> {
        match self {
            GailDiscriminator::Logits { logits } => logits
                .get((s, a))
                .copied()
                .ok_or_else(|| Error::invalid(format!("pair ({s}, {a}) out of range"))),
            GailDiscriminator::Stitched(d) => d.logit(&Obs::Index(s), &Obs::Index(a)),
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> Result<f64> {
        Ok(nn::sigmoid(self.logit(s, a)?))
    }

    pub fn table(&self, n_states: usize, n_actions: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((n_states, n_actions));
        for ((s, a), v) in out.indexed_iter_mut() {
            *v = self.prob(s, a)?;
        }
        Ok(out)
    }
}

/// Objective `mean_pi log D + mean_expert log(1 - D)` and its gradient in
/// the discriminator parameters (the logit table, or the concatenated
/// discriminator and ratio networks).
pub fn discriminator_objective(
    disc: &GailDiscriminator,
    expert: &[(usize, usize)],
    rollouts: &[(usize, usize)],
) -> Result<(f64, Vec<f64>)> {
    if expert.is_empty() || rollouts.is_empty() {
        return Err(Error::Empty("discriminator batches must be nonempty".into()));
    }
    let w_pi = 1.0 / rollouts.len() as f64;
    let w_e = 1.0 / expert.len() as f64;
    // d/dl log sigmoid(l) = 1 - D; d/dl log(1 - sigmoid(l)) = -D.
    let terms = rollouts
        .iter()
        .map(|&p| (p, w_pi, true))
        .chain(expert.iter().map(|&p| (p, w_e, false)));
    match disc {
        GailDiscriminator::Logits { logits } => {
            let mut grad = Array2::zeros(logits.dim());
            let mut value = 0.0;
            for ((s, a), w, policy_side) in terms {
                let l = disc.logit(s, a)?;
                let d = nn::sigmoid(l);
                if policy_side {
                    value += w * nn::log_sigmoid(l);
                    grad[[s, a]] += w * (1.0 - d);
                } else {
                    value += w * nn::log_sigmoid(-l);
                    grad[[s, a]] -= w * d;
                }
            }
            Ok((value, grad.into_raw_vec_and_offset().0))
        }
        GailDiscriminator::Stitched(st) => {
            let mut model = st.clone();
            let (d_net, y_net) = model
                .networks_mut()
                .ok_or_else(|| Error::invalid("stitched discriminator is not trainable"))?;
            let mut gd = d_net.zero_grad();
            let mut gy = y_net.zero_grad();
            let mut value = 0.0;
            for ((s, a), w, policy_side) in terms {
                let (so, ao) = (Obs::Index(s), Obs::Index(a));
                let l = st.logit(&so, &ao)?;
                let d = nn::sigmoid(l);
                let coef = if policy_side { w * (1.0 - d) } else { -w * d };
                st.add_logit_grad(&so, &ao, coef, &mut gd, &mut gy)?;
                value += w * if policy_side {
                    nn::log_sigmoid(l)
                } else {
                    nn::log_sigmoid(-l)
                };
            }
            Ok((value, gd.0.into_iter().chain(gy.0).collect()))
        }
    }
}

/// One ascent step on the discriminator objective; returns the loss
/// (negated objective) before the step.
pub fn gail_discriminator_step(
    disc: &mut GailDiscriminator,
    expert: &[(usize, usize)],
    rollouts: &[(usize, usize)],
    lr: f64,
    scaling: GradientScaling,
) -> Result<f64> {
    let (value, mut grad) = discriminator_objective(disc, expert, rollouts)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "discriminator loss".into(),
            step: 0,
        });
    }
    match disc {
        GailDiscriminator::Logits { logits } => {
            if scaling == GradientScaling::PerVisit {
                let n_a = logits.ncols();
                let mut mass = vec![0.0; grad.len()];
                for &(s, a) in rollouts {
                    mass[s * n_a + a] += 1.0 / rollouts.len() as f64;
                }
                for &(s, a) in expert {
                    mass[s * n_a + a] += 1.0 / expert.len() as f64;
                }
                for (g, m) in grad.iter_mut().zip(&mass) {
                    if *m > 0.0 {
                        *g /= m;
                    }
                }
            }
            for (l, g) in logits.iter_mut().zip(&grad) {
                *l += lr * g;
            }
        }
        GailDiscriminator::Stitched(st) => {
            let (d_net, y_net) = st
                .networks_mut()
                .ok_or_else(|| Error::invalid("stitched discriminator is not trainable"))?;
            let n_d = d_net.n_params();
            for (p, g) in d_net.params_mut().iter_mut().zip(&grad[..n_d]) {
                *p += lr * g;
            }
            for (p, g) in y_net.params_mut().iter_mut().zip(&grad[n_d..]) {
                *p += lr * g;
            }
        }
    }
    Ok(-value)
}

/// One complete episode of `(s, a)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub pairs: Vec<(usize, usize)>,
}

pub fn rollout_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    horizon: usize,
    rng: &mut R,
) -> Episode {
    let mut s = sample_index(mdp.initial().iter().copied(), rng);
    let mut pairs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.sample(s, rng);
        pairs.push((s, a));
        let succ = mdp.successors(s, a);
        s = succ[sample_index(succ.iter().map(|&(_, p)| p), rng)].0;
    }
    Episode { pairs }
}

pub fn step_rewards(disc: &GailDiscriminator, episode: &Episode, kind: PolicyReward) -> Result<Vec<f64>> {
    episode
        .pairs
        .iter()
        .map(|&(s, a)| {
            let l = disc.logit(s, a)?;
            Ok(match kind {
                PolicyReward::NegLogD => -nn::log_sigmoid(l),
                PolicyReward::LogOneMinusD => nn::log_sigmoid(-l),
            })
        })
        .collect()
}

/// Discounted reward-to-go minus the per-step batch mean.
pub fn advantages(rewards: &[Vec<f64>], discount: f64) -> Result<Vec<Vec<f64>>> {
    if rewards.is_empty() {
        return Err(Error::Empty("no rollouts".into()));
    }
    let to_go: Vec<Vec<f64>> = rewards
        .iter()
        .map(|r| {
            let mut g = vec![0.0; r.len()];
            let mut acc = 0.0;
            for t in (0..r.len()).rev() {
                acc = r[t] + discount * acc;
                g[t] = acc;
            }
            g
        })
        .collect();
    let max_len = to_go.iter().map(Vec::len).max().unwrap_or(0);
    let mut baseline = vec![0.0; max_len];
    let mut counts = vec![0.0; max_len];
    for g in &to_go {
        for (t, v) in g.iter().enumerate() {
            baseline[t] += v;
            counts[t] += 1.0;
        }
    }
    for (b, c) in baseline.iter_mut().zip(&counts) {
        *b /= c;
    }
    Ok(to_go
        .into_iter()
        .map(|g| g.iter().enumerate().map(|(t, v)| v - baseline[t]).collect())
        .collect())
}

/// Surrogate `mean_i sum_t adv log pi(a_t|s_t)` and its logit gradient.
pub fn policy_surrogate(policy: &SoftmaxPolicy, episodes: &[Episode], adv: &[Vec<f64>]) -> Result<(f64, Array2<f64>)> {
    if episodes.is_empty() || episodes.len() != adv.len() {
        return Err(Error::shape(episodes.len(), adv.len()));
    }
    let probs = policy.probs();
    let n_a = policy.logits.ncols();
    let mut grad = Array2::zeros(policy.logits.dim());
    let mut value = 0.0;
    let inv = 1.0 / episodes.len() as f64;
    for (ep, adv) in episodes.iter().zip(adv) {
        for (&(s, a), &w) in ep.pairs.iter().zip(adv) {
            let lp = nn::log_softmax(
                policy
                    .logits
                    .row(s)
                    .as_slice()
                    .ok_or_else(|| Error::invalid("non-contiguous logits"))?,
            );
            value += inv * w * lp[a];
            for k in 0..n_a {
                let indicator = if k == a { 1.0 } else { 0.0 };
                grad[[s, k]] += inv * w * (indicator - probs.prob(s, k));
            }
        }
    }
    Ok((value, grad))
}

/// Score-function ascent step on the discounted return of the per-step
/// rewards with a mean-return baseline.
pub fn gail_policy_step(
    policy: &mut SoftmaxPolicy,
    episodes: &[Episode],
    rewards: &[Vec<f64>],
    discount: f64,
    lr: f64,
    scaling: GradientScaling,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Empty("no rollouts".into()));
    }
    let adv = advantages(rewards, discount)?;
    let (value, mut grad) = policy_surrogate(policy, episodes, &adv)?;
    if scaling == GradientScaling::PerVisit {
        let mut visits = vec![0.0; grad.nrows()];
        for &(s, _) in episodes.iter().flat_map(|e| &e.pairs) {
            visits[s] += 1.0;
        }
        let n = episodes.len() as f64;
        for (mut row, &v) in grad.rows_mut().into_iter().zip(&visits) {
            if v > 0.0 {
                row *= n / v;
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "policy gradient".into(),
            step: 0,
        });
    }
    policy.logits.scaled_add(lr, &grad);
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct GailRun {
    pub policy: SoftmaxPolicy,
    pub discriminator: GailDiscriminator,
    pub curve: LearningCurve,
    pub env_steps: usize,
}

pub const RETURN_METRIC: &str = "return";
pub const KL_METRIC: &str = "kl_expert";
pub const DISC_LOSS_METRIC: &str = "disc_loss";

fn evaluate(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    rho_e: &EmpiricalDistribution,
    episodes: usize,
    curve: &mut LearningCurve,
) -> Result<()> {
    curve.push(episodes, RETURN_METRIC, policy_return(mdp, policy)?)?;
    curve.push(episodes, KL_METRIC, occupancy_divergence(mdp, policy, rho_e)?)
}

/// Alternates rollouts, a policy update on the current discriminator's
/// rewards, and discriminator updates, until the episode budget is spent.
/// The exact return is logged before training and after every iteration.
pub fn run_gail(
    mdp: &TabularMdp,
    policy_init: &TabularPolicy,
    disc_init: GailDiscriminator,
    expert: &Dataset,
    cfg: &GailConfig,
) -> Result<GailRun> {
    cfg.validate()?;
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if policy_init.probs().dim() != (n_s, n_a) {
        return Err(Error::shape(
            format!("[{n_s}, {n_a}]"),
            format!("{:?}", policy_init.probs().dim()),
        ));
    }
    expert.validate_tabular(n_s, n_a)?;
    let expert_pairs: Vec<(usize, usize)> = expert
        .indexed()
        .map(|r| r.map(|(s, a, _)| (s, a)))
        .collect::<Result<_>>()?;
    if expert_pairs.is_empty() {
        return Err(Error::Empty("no expert transitions".into()));
    }
    let rho_e = EmpiricalDistribution::from_dataset(expert, None, n_s, n_a, CountOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = SoftmaxPolicy::from_policy(policy_init, cfg.prob_floor);
    let mut disc = disc_init;
    let mut curve = LearningCurve::default();
    let credit = cfg.credit_discount.unwrap_or(mdp.discount());
    let mut consumed = 0;
    let mut env_steps = 0;
    evaluate(mdp, &policy.probs(), &rho_e, 0, &mut curve)?;
    while consumed + cfg.rollouts_per_iter <= cfg.episodes {
        let current = policy.probs();
        let episodes: Vec<Episode> = (0..cfg.rollouts_per_iter)
            .map(|_| rollout_episode(mdp, &current, cfg.horizon, &mut rng))
            .collect();
        consumed += episodes.len();
        env_steps += episodes.iter().map(|e| e.pairs.len()).sum::<usize>();
        let rewards = episodes
            .iter()
            .map(|e| step_rewards(&disc, e, cfg.reward))
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..cfg.policy_steps_per_iter {
            gail_policy_step(
                &mut policy,
                &episodes,
                &rewards,
                credit,
                cfg.lr_policy,
                cfg.policy_scaling,
            )?;
        }
        let rollout_pairs: Vec<(usize, usize)> = episodes.iter().flat_map(|e| e.pairs.iter().copied()).collect();
        let expert_batch: Vec<(usize, usize)> = (0..rollout_pairs.len())
            .map(|_| *expert_pairs.choose(&mut rng).unwrap())
            .collect();
        let mut loss = 0.0;
        for _ in 0..cfg.disc_steps_per_iter {
            loss = gail_discriminator_step(&mut disc, &expert_batch, &rollout_pairs, cfg.lr_disc, cfg.disc_scaling)?;
        }
        evaluate(mdp, &policy.probs(), &rho_e, consumed, &mut curve)?;
        curve.push(consumed, DISC_LOSS_METRIC, loss)?;
    }
    Ok(GailRun {
        policy,
        discriminator: disc,
        curve,
        env_steps,
    })
}

/// Minimum of `return / reference` over the first `window` evaluations
/// after training starts.
pub fn retention(curve: &LearningCurve, reference: f64, window: usize) -> Result<f64> {
    if reference <= 0.0 {
        return Err(Error::invalid("retention needs a positive reference return"));
    }
    let values: Vec<f64> = curve
        .series(RETURN_METRIC)
        .into_iter()
        .filter(|(e, _)| *e > 0)
        .take(window)
        .map(|(_, v)| v / reference)
        .collect();
    if values.is_empty() {
        return Err(Error::Empty("no evaluations after training started".into()));
    }
    Ok(values.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningConfig {
    pub gail: GailConfig,
    pub seeds: Vec<u64>,
    /// Evaluations considered for retention.
    pub window: usize,
    /// Rollouts for the extra arm that fits the discriminator to samples of
    /// the pretrained policy before finetuning; `None` skips it.
    pub rollout_aligned_episodes: Option<usize>,
    pub rollout_aligned_steps: usize,
}

impl Default for UnlearningConfig {
    fn default() -> Self {
        Self {
            gail: GailConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            window: 5,
            rollout_aligned_episodes: None,
            rollout_aligned_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRetention {
    pub seed: u64,
    pub stitched: f64,
    pub random: f64,
    pub rollout_aligned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningReport {
    pub pretrained_return: f64,
    pub window: usize,
    pub seeds: Vec<SeedRetention>,
}

impl UnlearningReport {
    pub fn stitched_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.stitched >= s.random).count()
    }

    pub fn min_stitched(&self) -> f64 {
        self.seeds.iter().map(|s| s.stitched).fold(f64::INFINITY, f64::min)
    }
}

/// Finetunes the same pretrained policy from the stitched discriminator and
/// from a random one for every seed, and reports the retention of each.
pub fn unlearning_experiment(
    mdp: &TabularMdp,
    pretrained: &TabularPolicy,
    stitched: &GailDiscriminator,
    expert: &Dataset,
    cfg: &UnlearningConfig,
) -> Result<UnlearningReport> {
    if cfg.seeds.is_empty() || cfg.window == 0 {
        return Err(Error::invalid("need at least one seed and a positive window"));
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let pretrained_return = policy_return(mdp, pretrained)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let arm = |init: GailDiscriminator, kind: DiscInit| -> Result<f64> {
            let gail = GailConfig {
                seed,
                disc_init: kind,
                ..cfg.gail.clone()
            };
            let run = run_gail(mdp, pretrained, init, expert, &gail)?;
            retention(&run.curve, pretrained_return, cfg.window)
        };
        let stitched_r = arm(stitched.clone(), DiscInit::Stitched)?;
        let random_r = arm(GailDiscriminator::random(n_s, n_a, seed), DiscInit::Random)?;
        let rollout_aligned = match cfg.rollout_aligned_episodes {
            Some(n) => {
                let init = rollout_aligned_discriminator(mdp, pretrained, expert, n, cfg, seed)?;
                Some(arm(init, DiscInit::Table)?)
            }
            None => None,
        };
        seeds.push(SeedRetention {
            seed,
            stitched: stitched_r,
            random: random_r,
            rollout_aligned,
        });
    }
    Ok(UnlearningReport {
        pretrained_return,
        window: cfg.window,
        seeds,
    })
}

/// Logit table fit from zero to rollouts of `policy` against expert pairs.
fn rollout_aligned_discriminator(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    expert: &Dataset,
    episodes: usize,
    cfg: &UnlearningConfig,
    seed: u64,
) -> Result<GailDiscriminator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rollouts: Vec<(usize, usize)> = (0..episodes)
        .flat_map(|_| rollout_episode(mdp, policy, cfg.gail.horizon, &mut rng).pairs)
        .collect();
    let expert_pairs: Vec<(usize, usize)> = expert
        .indexed()
        .map(|r| r.map(|(s, a, _)| (s, a)))
        .collect::<Result<_>>()?;
    let mut disc = GailDiscriminator::Logits {
        logits: Array2::zeros((mdp.n_states(), mdp.n_actions())),
    };
    for _ in 0..cfg.rollout_aligned_steps {
        gail_discriminator_step(&mut disc, &expert_pairs, &rollouts, 1.0, GradientScaling::PerVisit)?;
    }
    Ok(disc)
}
