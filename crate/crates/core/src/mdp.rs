//! Exact tabular MDP machinery: construction, expert generation, occupancy
//! measures, Bellman-flow residuals and returns.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite-state, finite-action MDP with known dynamics.
///
/// `transition[[s, a, s2]]` is the probability of landing in `s2` after
/// taking `a` in `s`. A discount of exactly 1 selects the average-reward
/// (undiscounted) convention.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    transition: Array3<f64>,
    initial: Array1<f64>,
    discount: f64,
    reward: Option<Array2<f64>>,
    successors: Vec<Vec<(usize, f64)>>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        initial: Array1<f64>,
        discount: f64,
        reward: Option<Array2<f64>>,
    ) -> Result<Self> {
        let (n_s, n_a, n_next) = transition.dim();
        if n_s == 0 || n_a == 0 {
            return Err(Error::invalid("mdp needs at least one state and one action"));
        }
        if n_next != n_s {
            return Err(Error::shape(
                format!("[{n_s}, {n_a}, {n_s}]"),
                format!("[{n_s}, {n_a}, {n_next}]"),
            ));
        }
        if initial.len() != n_s {
            return Err(Error::shape(n_s, initial.len()));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::invalid(format!("discount {discount} outside (0, 1]")));
        }
        for s in 0..n_s {
            for a in 0..n_a {
                let row = transition.slice(ndarray::s![s, a, ..]);
                if row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::invalid(format!("negative transition probability at ({s}, {a})")));
                }
                let total: f64 = row.sum();
                if (total - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::invalid(format!("T[.|{s},{a}] sums to {total}")));
                }
            }
        }
        if initial.iter().any(|&p| !(p >= 0.0)) || (initial.sum() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid("initial distribution is not a probability vector"));
        }
        if let Some(r) = &reward {
            if r.dim() != (n_s, n_a) {
                return Err(Error::shape(format!("[{n_s}, {n_a}]"), format!("{:?}", r.dim())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("reward table has non-finite entries"));
            }
        }
        let successors = (0..n_s * n_a)
            .map(|idx| {
                let (s, a) = (idx / n_a, idx % n_a);
                (0..n_s)
                    .filter_map(|s2| {
                        let p = transition[[s, a, s2]];
                        (p > 0.0).then_some((s2, p))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            transition,
            initial,
            discount,
            reward,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transition.dim().1
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn initial(&self) -> &Array1<f64> {
        &self.initial
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn is_undiscounted(&self) -> bool {
        self.discount == 1.0
    }

    pub fn reward(&self) -> Option<&Array2<f64>> {
        self.reward.as_ref()
    }

    pub fn reward_or_err(&self) -> Result<&Array2<f64>> {
        self.reward.as_ref().ok_or(Error::MissingReward)
    }

    /// Nonzero successors of `(s, a)` as `(next_state, probability)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions() + a]
    }

    /// `sum_{s'} T(s'|s,a) v(s')`.
    pub fn expected_next(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.successors(s, a).iter().map(|&(s2, p)| p * values[s2]).sum()
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.initial.clone(),
            discount,
            self.reward.clone(),
        )
    }

    pub fn with_reward(&self, reward: Option<Array2<f64>>) -> Result<Self> {
        Self::new(self.transition.clone(), self.initial.clone(), self.discount, reward)
    }

    pub fn with_initial(&self, initial: Array1<f64>) -> Result<Self> {
        Self::new(self.transition.clone(), initial, self.discount, self.reward.clone())
    }

    /// Random MDP with full-support dynamics and initial distribution, and
    /// rewards uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, discount: f64, rng: &mut R) -> Result<Self> {
        let mut transition = Array3::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let raw: Vec<f64> = (0..n_states).map(|_| 0.05 + rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                for (s2, w) in raw.iter().enumerate() {
                    transition[[s, a, s2]] = w / total;
                }
            }
        }
        let raw: Vec<f64> = (0..n_states).map(|_| 0.1 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let initial = Array1::from_iter(raw.iter().map(|w| w / total));
        let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random_range(-1.0..1.0));
        Self::new(
            renormalize(transition),
            renormalize_vec(initial),
            discount,
            Some(reward),
        )
    }

    pub fn to_document(&self) -> MdpDocument {
        let (n_s, n_a, _) = self.transition.dim();
        MdpDocument {
            n_states: n_s,
            n_actions: n_a,
            transition: (0..n_s)
                .map(|s| {
                    (0..n_a)
                        .map(|a| self.transition.slice(ndarray::s![s, a, ..]).to_vec())
                        .collect()
                })
                .collect(),
            initial: self.initial.to_vec(),
            discount: self.discount,
            reward: self.reward.as_ref().map(table_to_rows),
        }
    }

    pub fn from_document(doc: &MdpDocument) -> Result<Self> {
        let (n_s, n_a) = (doc.n_states, doc.n_actions);
        if doc.transition.len() != n_s || doc.transition.iter().any(|rows| rows.len() != n_a) {
            return Err(Error::shape(format!("{n_s}x{n_a} transition rows"), "ragged array"));
        }
        let mut transition = Array3::zeros((n_s, n_a, n_s));
        for (s, rows) in doc.transition.iter().enumerate() {
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_s {
                    return Err(Error::shape(n_s, row.len()));
                }
                for (s2, &p) in row.iter().enumerate() {
                    transition[[s, a, s2]] = p;
                }
            }
        }
        let reward = doc.reward.as_ref().map(|rows| rows_to_table(rows, n_a)).transpose()?;
        Self::new(transition, Array1::from(doc.initial.clone()), doc.discount, reward)
    }
}

impl Serialize for TabularMdp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularMdp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = MdpDocument::deserialize(deserializer)?;
        TabularMdp::from_document(&doc).map_err(serde::de::Error::custom)
    }
}

/// JSON layout of an MDP fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: Vec<f64>,
    pub discount: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<Vec<Vec<f64>>>,
}

pub(crate) fn table_to_rows(table: &Array2<f64>) -> Vec<Vec<f64>> {
    table.outer_iter().map(|row| row.to_vec()).collect()
}

pub(crate) fn rows_to_table(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(width, "ragged row"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::invalid(e.to_string()))
}

// Random draws are normalized once; this pass removes the last-ulp drift so
// rows sum to one within the construction tolerance.
fn renormalize(mut t: Array3<f64>) -> Array3<f64> {
    let (n_s, n_a, _) = t.dim();
    for s in 0..n_s {
        for a in 0..n_a {
            let total: f64 = t.slice(ndarray::s![s, a, ..]).sum();
            t.slice_mut(ndarray::s![s, a, ..]).mapv_inplace(|p| p / total);
        }
    }
    t
}

fn renormalize_vec(v: Array1<f64>) -> Array1<f64> {
    let total = v.sum();
    v.mapv(|p| p / total)
}

/// Row-stochastic table `probs[[s, a]] = pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::invalid("policy table is empty"));
        }
        for (s, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!("negative or NaN probability in row {s}")));
            }
            let total = row.sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(Self { probs })
    }

    /// Normalizes each row; rows with zero mass become uniform.
    pub fn from_weights(weights: &Array2<f64>) -> Result<Self> {
        let n_a = weights.ncols();
        let mut probs = weights.clone();
        for mut row in probs.outer_iter_mut() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::invalid("policy weights must be finite and nonnegative"));
            }
            let z = row.sum();
            if z > 0.0 {
                row.mapv_inplace(|w| w / z);
            } else {
                row.fill(1.0 / n_a as f64);
            }
        }
        Self::new(probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::invalid(format!("action {a} out of range")));
            }
            probs[[s, a]] = 1.0;
        }
        Self::new(probs)
    }

    /// Softmax of a logit table.
    pub fn softmax(logits: &Array2<f64>) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        Self { probs }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let logits = Array2::from_shape_fn((n_states, n_actions), |_| rng.random_range(-2.0..2.0));
        Self::softmax(&logits)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.probs.row(s).iter().copied(), rng)
    }

    /// Largest total-variation distance between matching rows.
    pub fn max_tv(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .outer_iter()
            .zip(other.probs.outer_iter())
            .map(|(p, q)| 0.5 * p.iter().zip(q.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        table_to_rows(&self.probs)
    }
}

impl Serialize for TabularPolicy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PolicyDocument {
            n_states: self.n_states(),
            n_actions: self.n_actions(),
            probs: self.to_rows(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = PolicyDocument::deserialize(deserializer)?;
        let table = rows_to_table(&doc.probs, doc.n_actions).map_err(serde::de::Error::custom)?;
        if table.nrows() != doc.n_states {
            return Err(serde::de::Error::custom("row count does not match n_states"));
        }
        TabularPolicy::new(table).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    n_states: usize,
    n_actions: usize,
    probs: Vec<Vec<f64>>,
}

pub(crate) fn sample_index<R: Rng + ?Sized>(weights: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last
}

/// Normalized state-action occupancy `rho[[s, a]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    rho: Array2<f64>,
}

impl OccupancyMeasure {
    pub fn new(rho: Array2<f64>) -> Result<Self> {
        if rho.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("occupancy has negative entries"));
        }
        if (rho.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("occupancy sums to {}", rho.sum())));
        }
        Ok(Self { rho })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.rho
    }

    pub fn into_table(self) -> Array2<f64> {
        self.rho
    }

    pub fn state_marginal(&self) -> Array1<f64> {
        self.rho.sum_axis(ndarray::Axis(1))
    }
}

/// Grid world layout. Cells are indexed `y * width + x`; actions are
/// north (y+1), east (x+1), south (y-1), west (x-1). Moves into a wall
/// leave the agent in place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub goal: (usize, usize),
    pub slip: f64,
    pub step_penalty: f64,
    pub discount: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, goal: (usize, usize), slip: f64, step_penalty: f64) -> Self {
        Self {
            width,
            height,
            goal,
            slip,
            step_penalty,
            discount: 0.99,
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn goal_state(&self) -> usize {
        self.cell(self.goal.0, self.goal.1)
    }

    /// Row-major `(x, y)` of a state index.
    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }
}

pub const GRID_ACTIONS: usize = 4;

/// Four-action grid world with slippery moves and an absorbing goal.
pub fn build_gridworld(spec: &GridSpec) -> Result<TabularMdp> {
    let GridSpec {
        width,
        height,
        goal,
        slip,
        step_penalty,
        discount,
    } = *spec;
    if width == 0 || height == 0 {
        return Err(Error::invalid("grid dimensions must be at least 1"));
    }
    if goal.0 >= width || goal.1 >= height {
        return Err(Error::invalid(format!("goal {goal:?} outside {width}x{height} grid")));
    }
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::invalid(format!("slip {slip} outside [0, 1)")));
    }
    let n_s = width * height;
    let goal_s = spec.goal_state();
    let step = |x: usize, y: usize, dir: usize| -> usize {
        let (nx, ny) = match dir {
            0 if y + 1 < height => (x, y + 1),
            1 if x + 1 < width => (x + 1, y),
            2 if y > 0 => (x, y - 1),
            3 if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        ny * width + nx
    };
    let mut transition = Array3::zeros((n_s, GRID_ACTIONS, n_s));
    let mut reward = Array2::from_elem((n_s, GRID_ACTIONS), step_penalty);
    for s in 0..n_s {
        let (x, y) = spec.coords(s);
        for a in 0..GRID_ACTIONS {
            if s == goal_s {
                transition[[s, a, s]] = 1.0;
                reward[[s, a]] = 1.0;
                continue;
            }
            for dir in 0..GRID_ACTIONS {
                let p = if dir == a { 1.0 - slip } else { slip / 3.0 };
                if p > 0.0 {
                    transition[[s, a, step(x, y, dir)]] += p;
                }
            }
        }
    }
    let starts = if n_s > 1 { n_s - 1 } else { 1 };
    let initial = Array1::from_shape_fn(n_s, |s| {
        if n_s == 1 {
            1.0
        } else if s == goal_s {
            0.0
        } else {
            1.0 / starts as f64
        }
    });
    TabularMdp::new(
        renormalize(transition),
        renormalize_vec(initial),
        discount,
        Some(reward),
    )
}

/// Optimal deterministic policy by synchronous value iteration; ties go to
/// the lowest action index.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<TabularPolicy> {
    let reward = mdp.reward_or_err()?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if mdp.is_undiscounted() {
        return Err(Error::invalid("value iteration requires discount < 1"));
    }
    let (n_s, n_a, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut v = vec![0.0; n_s];
    let q_of =
        |v: &[f64]| Array2::from_shape_fn((n_s, n_a), |(s, a)| reward[[s, a]] + gamma * mdp.expected_next(s, a, v));
    // Stop once the Bellman update is small enough that v is tol-accurate.
    let threshold = tol * (1.0 - gamma) / gamma;
    for _ in 0..1_000_000 {
        let q = q_of(&v);
        let next: Vec<f64> = q
            .outer_iter()
            .map(|row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < threshold {
            break;
        }
    }
    let q = q_of(&v);
    let actions: Vec<usize> = q
        .outer_iter()
        .map(|row| {
            let best = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let slack = 1e-12 * best.abs().max(1.0);
            row.iter().position(|&x| x >= best - slack).unwrap_or(0)
        })
        .collect();
    TabularPolicy::deterministic(&actions, n_a)
}

fn check_policy_shape(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.probs().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::shape(
            format!("[{}, {}]", mdp.n_states(), mdp.n_actions()),
            format!("{:?}", policy.probs().dim()),
        ));
    }
    Ok(())
}

/// State-to-state kernel `P[s, s2] = sum_a pi(a|s) T(s2|s,a)`.
pub fn state_kernel(mdp: &TabularMdp, policy: &TabularPolicy) -> Array2<f64> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut kernel = Array2::zeros((n_s, n_s));
    for s in 0..n_s {
        for a in 0..n_a {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for &(s2, p) in mdp.successors(s, a) {
                kernel[[s, s2]] += pa * p;
            }
        }
    }
    kernel
}

/// Normalized occupancy of `policy`, by a direct dense solve.
///
/// For discount < 1 the state marginal solves
/// `d = (1 - gamma) mu + gamma P^T d`. With discount 1 the long-run
/// average visitation is returned, which must be unique.
pub fn stationary_distribution(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    check_policy_shape(mdp, policy)?;
    let n_s = mdp.n_states();
    let gamma = mdp.discount();
    let kernel = state_kernel(mdp, policy);
    let (matrix, rhs) = if mdp.is_undiscounted() {
        // (I - P^T) d = 0 with the last row replaced by sum(d) = 1.
        let mut m = DMatrix::from_fn(n_s, n_s, |i, j| if i == j { 1.0 } else { 0.0 } - kernel[[j, i]]);
        let mut rhs = DVector::zeros(n_s);
        for j in 0..n_s {
            m[(n_s - 1, j)] = 1.0;
        }
        rhs[n_s - 1] = 1.0;
        (m, rhs)
    } else {
        let m = DMatrix::from_fn(n_s, n_s, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * kernel[[j, i]]);
        let rhs = DVector::from_iterator(n_s, mdp.initial().iter().map(|&mu| (1.0 - gamma) * mu));
        (m, rhs)
    };
    let marginal = matrix
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("state occupancy".into()))?;
    if marginal.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("state occupancy".into()));
    }
    let mut rho = Array2::from_shape_fn((n_s, mdp.n_actions()), |(s, a)| {
        marginal[s].max(0.0) * policy.prob(s, a)
    });
    let total = rho.sum();
    rho.mapv_inplace(|x| x / total);
    OccupancyMeasure::new(rho)
}

/// Per-state flow violation
/// `f_s(rho) = (1 - gamma) mu(s) + gamma sum_{a,s'} T(s|s',a) rho(s',a) - sum_a rho(s,a)`.
pub fn bellman_flow_residual(mdp: &TabularMdp, rho: &Array2<f64>) -> Result<Array1<f64>> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if rho.dim() != (n_s, n_a) {
        return Err(Error::shape(format!("[{n_s}, {n_a}]"), format!("{:?}", rho.dim())));
    }
    let gamma = mdp.discount();
    let mut residual = mdp.initial().mapv(|mu| (1.0 - gamma) * mu);
    for s in 0..n_s {
        for a in 0..n_a {
            let mass = rho[[s, a]];
            residual[s] -= mass;
            for &(s2, p) in mdp.successors(s, a) {
                residual[s2] += gamma * p * mass;
            }
        }
    }
    Ok(residual)
}

/// Expected reward under the normalized occupancy, `E_{rho^pi}[R]`.
pub fn policy_return(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    let reward = mdp.reward_or_err()?;
    let rho = stationary_distribution(mdp, policy)?;
    Ok((rho.table() * reward).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state_cycle(gamma: f64) -> TabularMdp {
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 1]] = 1.0;
        t[[1, 0, 0]] = 1.0;
        TabularMdp::new(t, Array1::from(vec![1.0, 0.0]), gamma, None).unwrap()
    }

    #[test]
    fn degenerate_grid_is_single_self_loop() {
        let mdp = build_gridworld(&GridSpec::new(1, 1, (0, 0), 0.0, 0.0)).unwrap();
        assert_eq!(mdp.n_states(), 1);
        for a in 0..4 {
            assert_eq!(mdp.transition()[[0, a, 0]], 1.0);
        }
        assert_eq!(mdp.initial()[0], 1.0);
    }

    #[test]
    fn deterministic_east_move() {
        let spec = GridSpec::new(2, 1, (1, 0), 0.0, 0.0);
        let mdp = build_gridworld(&spec).unwrap();
        assert_eq!(mdp.transition()[[spec.cell(0, 0), 1, spec.cell(1, 0)]], 1.0);
        assert_eq!(mdp.initial().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn slippery_grid_rows_are_stochastic() {
        let mdp = build_gridworld(&GridSpec::new(8, 8, (7, 7), 0.1, -0.01)).unwrap();
        for s in 0..64 {
            for a in 0..4 {
                let total: f64 = mdp.transition().slice(ndarray::s![s, a, ..]).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(build_gridworld(&GridSpec::new(0, 3, (0, 0), 0.0, 0.0)).is_err());
        assert!(build_gridworld(&GridSpec::new(3, 3, (3, 0), 0.0, 0.0)).is_err());
        assert!(build_gridworld(&GridSpec::new(3, 3, (0, 0), 1.0, 0.0)).is_err());
    }

    #[test]
    fn value_iteration_trivial_cases() {
        let one = build_gridworld(&GridSpec::new(1, 1, (0, 0), 0.0, 0.0)).unwrap();
        let pi = value_iteration(&one, 1e-8).unwrap();
        assert_eq!(pi.prob(0, 0), 1.0);

        let spec = GridSpec::new(2, 1, (1, 0), 0.0, 0.0);
        let two = build_gridworld(&spec).unwrap();
        let pi = value_iteration(&two, 1e-8).unwrap();
        assert_eq!(pi.prob(spec.cell(0, 0), 1), 1.0);
    }

    #[test]
    fn value_iteration_needs_reward() {
        let mdp = two_state_cycle(0.5);
        assert!(matches!(value_iteration(&mdp, 1e-6), Err(Error::MissingReward)));
    }

    #[test]
    fn cycle_occupancy_is_geometric() {
        let mdp = two_state_cycle(0.5);
        let rho = stationary_distribution(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((rho.table()[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((rho.table()[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_state_occupancy_is_one() {
        let mdp = TabularMdp::new(Array3::ones((1, 1, 1)), Array1::ones(1), 0.7, None).unwrap();
        let rho = stationary_distribution(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert_eq!(rho.table()[[0, 0]], 1.0);
    }

    #[test]
    fn flow_residual_hand_arithmetic() {
        let mdp = two_state_cycle(0.5);
        let rho = Array2::from_elem((2, 1), 0.5);
        let f = bellman_flow_residual(&mdp, &rho).unwrap();
        assert!((f[0] - 0.25).abs() < 1e-15);
        assert!(bellman_flow_residual(&mdp, &Array2::zeros((3, 1))).is_err());
    }

    #[test]
    fn constant_reward_returns_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = TabularMdp::random(4, 2, 0.9, &mut rng)
            .unwrap()
            .with_reward(Some(Array2::from_elem((4, 2), 0.37)))
            .unwrap();
        let pi = TabularPolicy::random(4, 2, &mut rng);
        assert!((policy_return(&mdp, &pi).unwrap() - 0.37).abs() < 1e-12);
    }

    #[test]
    fn undiscounted_occupancy_is_chain_stationary() {
        let mdp = two_state_cycle(1.0);
        let rho = stationary_distribution(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((rho.table()[[0, 0]] - 0.5).abs() < 1e-12);
        let f = bellman_flow_residual(&mdp, rho.table()).unwrap();
        assert!(f.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn construction_rejects_non_stochastic_rows() {
        let mut t = Array3::zeros((1, 1, 1));
        t[[0, 0, 0]] = 0.9;
        assert!(TabularMdp::new(t, Array1::ones(1), 0.9, None).is_err());
        assert!(TabularMdp::new(Array3::ones((1, 1, 1)), Array1::ones(1), 1.5, None).is_err());
    }

    #[test]
    fn json_document_round_trip() {
        let mdp = build_gridworld(&GridSpec::new(3, 2, (2, 1), 0.2, -0.05)).unwrap();
        let text = serde_json::to_string(&mdp).unwrap();
        let back: TabularMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(mdp, back);
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(doc["transition"][0][0].is_array());
    }
}
