//! Ground truth for the occupancy-regularized primal
//! `max_rho E_rho[R] - alpha KL(rho || rho_o)` subject to Bellman flow, by
//! search over policies, plus the shipped fixture suite.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmpiricalDistribution;
use crate::error::{Error, Result};
use crate::mdp::{self, stationary_distribution, MdpDocument, OccupancyMeasure, TabularMdp, TabularPolicy};
use crate::reward::{auxiliary_reward, fit_discriminator_closed_form, ClipBounds};
use crate::ssp::{dual_value, ExactProblem};

pub const MAX_ORACLE_STATES: usize = 5;
pub const MAX_ORACLE_ACTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub rho_star: OccupancyMeasure,
    pub pi_star: TabularPolicy,
    pub primal_value: f64,
}

/// `E_rho[R] - alpha KL(rho || rho_o)`; `-inf` when `rho` leaves the
/// support of `rho_o`.
pub fn primal_objective(problem: &ExactProblem, rho: &Array2<f64>) -> f64 {
    let alpha = problem.alpha();
    let mut total = 0.0;
    for ((idx, &p), &q) in rho.indexed_iter().zip(problem.weights().iter()) {
        if p <= 0.0 {
            continue;
        }
        if q <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += p * (problem.reward()[idx] - alpha * (p / q).ln());
    }
    total
}

/// Primal objective at the occupancy of `policy`.
pub fn policy_objective(problem: &ExactProblem, policy: &TabularPolicy) -> Result<f64> {
    let rho = stationary_distribution(problem.mdp(), policy)?;
    Ok(primal_objective(problem, rho.table()))
}

fn solution(problem: &ExactProblem, policy: TabularPolicy) -> Result<OracleSolution> {
    let rho = stationary_distribution(problem.mdp(), &policy)?;
    let value = primal_objective(problem, rho.table());
    if !value.is_finite() {
        return Err(Error::invalid("no policy keeps the occupancy inside the data support"));
    }
    Ok(OracleSolution {
        rho_star: rho,
        pi_star: policy,
        primal_value: value,
    })
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximizer of a quasi-concave `f` on `[0, 1]`, with endpoints checked.
fn golden_max<F: FnMut(f64) -> f64>(mut f: F, tol: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    let mut best = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    for x in [0.0, 1.0] {
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

/// Row for 2 or 3 actions from coordinates in the unit square.
fn simplex_point(n_actions: usize, p: f64, q: f64) -> [f64; 3] {
    match n_actions {
        2 => [p, 1.0 - p, 0.0],
        _ => [p, (1.0 - p) * q, (1.0 - p) * (1.0 - q)],
    }
}

/// Block-coordinate search over policy rows.
///
/// Changing the policy at a single state moves the occupancy along a
/// linear-fractional path, so the objective is quasi-concave in each row and
/// nested golden-section search finds the row optimum. Sweeps repeat until
/// the objective improves by less than `tol`.
pub fn primal_brute_force(problem: &ExactProblem, tol: f64) -> Result<OracleSolution> {
    let (n_s, n_a) = (problem.n_states(), problem.n_actions());
    if n_s > MAX_ORACLE_STATES || n_a > MAX_ORACLE_ACTIONS {
        return Err(Error::SizeGuard(format!(
            "oracle handles at most {MAX_ORACLE_STATES} states and {MAX_ORACLE_ACTIONS} actions, got {n_s}x{n_a}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut probs = Array2::from_elem((n_s, n_a), 1.0 / n_a as f64);
    if n_a == 1 {
        return solution(problem, TabularPolicy::new(probs)?);
    }
    let eval = |probs: &Array2<f64>| -> f64 {
        match TabularPolicy::new(probs.clone()).and_then(|p| policy_objective(problem, &p)) {
            Ok(v) if v.is_nan() => f64::NEG_INFINITY,
            Ok(v) => v,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let x_tol = 1e-10;
    let mut current = eval(&probs);
    for _sweep in 0..10_000 {
        let before = current;
        for s in 0..n_s {
            let mut trial = probs.clone();
            let row_value = |p: f64, q: f64, trial: &mut Array2<f64>| {
                let row = simplex_point(n_a, p, q);
                for a in 0..n_a {
                    trial[[s, a]] = row[a];
                }
                eval(trial)
            };
            let (p, q, value) = if n_a == 2 {
                let (p, v) = golden_max(|p| row_value(p, 0.0, &mut trial), x_tol);
                (p, 0.0, v)
            } else {
                let inner = |p: f64, trial: &mut Array2<f64>| {
                    let mut probe = trial.clone();
                    golden_max(|q| row_value(p, q, &mut probe), x_tol)
                };
                let mut outer_trial = trial.clone();
                let (p, v) = golden_max(|p| inner(p, &mut outer_trial).1, x_tol);
                let (q, _) = inner(p, &mut outer_trial);
                (p, q, v)
            };
            if value >= current {
                let row = simplex_point(n_a, p, q);
                for a in 0..n_a {
                    probs[[s, a]] = row[a];
                }
                current = value;
            }
        }
        if current - before < tol * 1e-3 {
            break;
        }
    }
    solution(problem, TabularPolicy::new(probs)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorAscentConfig {
    pub step: f64,
    pub max_iterations: usize,
    /// Stop when the objective improves by less than this per iteration.
    pub tol: f64,
}

impl Default for MirrorAscentConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iterations: 100_000,
            tol: 1e-13,
        }
    }
}

/// Exponentiated-gradient ascent on the policy simplices with a
/// backtracking step. Each step multiplies `pi(a|s)` by `exp(step * Q(s,a))`
/// where `Q` is the action value of the pseudo-reward
/// `R - alpha (log(rho / rho_o) + 1)`, the gradient of the objective with
/// respect to `rho`. Pairs outside the data support are never played.
/// Discounted problems only; no size guard.
pub fn primal_mirror_ascent(problem: &ExactProblem, cfg: &MirrorAscentConfig) -> Result<OracleSolution> {
    if problem.is_undiscounted() {
        return Err(Error::invalid("mirror ascent oracle needs a discount below 1"));
    }
    let (n_s, n_a) = (problem.n_states(), problem.n_actions());
    let gamma = problem.discount();
    let alpha = problem.alpha();
    let allowed = problem.weights().mapv(|w| w > 0.0);
    let mut probs = Array2::from_shape_fn((n_s, n_a), |(s, a)| if allowed[[s, a]] { 1.0 } else { 0.0 });
    for mut row in probs.outer_iter_mut() {
        let z = row.sum();
        if z > 0.0 {
            row.mapv_inplace(|p| p / z);
        } else {
            row.fill(1.0 / n_a as f64);
        }
    }
    let mut policy = TabularPolicy::new(probs)?;
    let mut value = policy_objective(problem, &policy)?;
    let mut step = cfg.step;
    for _ in 0..cfg.max_iterations {
        let rho = stationary_distribution(problem.mdp(), &policy)?;
        let g = Array2::from_shape_fn((n_s, n_a), |(s, a)| {
            let p = rho.table()[[s, a]];
            let q = problem.weights()[[s, a]];
            if q <= 0.0 {
                0.0
            } else {
                problem.reward()[[s, a]] - alpha * ((p.max(1e-300) / q).ln() + 1.0)
            }
        });
        let q_values = action_values(problem.mdp(), &policy, &g, gamma)?;
        let mut improved = false;
        while step > 1e-12 {
            let mut next = policy.probs().clone();
            for s in 0..n_s {
                let m = (0..n_a)
                    .filter(|&a| allowed[[s, a]])
                    .map(|a| q_values[[s, a]])
                    .fold(f64::NEG_INFINITY, f64::max);
                for a in 0..n_a {
                    if allowed[[s, a]] {
                        next[[s, a]] *= (step * (q_values[[s, a]] - m)).exp();
                    }
                }
            }
            let candidate = TabularPolicy::from_weights(&next)?;
            let v = policy_objective(problem, &candidate)?;
            if v >= value {
                let gain = v - value;
                policy = candidate;
                value = v;
                step *= 1.5;
                improved = gain >= cfg.tol;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    solution(problem, policy)
}

/// `Q(s,a) = g(s,a) + gamma E[V(s')]` with `V = sum_a pi Q`.
fn action_values(mdp: &TabularMdp, policy: &TabularPolicy, g: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    let n_s = mdp.n_states();
    let kernel = mdp::state_kernel(mdp, policy);
    let m = nalgebra::DMatrix::from_fn(n_s, n_s, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * kernel[[i, j]]);
    let rhs = nalgebra::DVector::from_fn(n_s, |s, _| {
        (0..mdp.n_actions()).map(|a| policy.prob(s, a) * g[[s, a]]).sum()
    });
    let v = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("policy evaluation".into()))?;
    let v: Vec<f64> = v.iter().copied().collect();
    Ok(Array2::from_shape_fn(g.dim(), |(s, a)| {
        g[[s, a]] + gamma * mdp.expected_next(s, a, &v)
    }))
}

/// `dual_value(nu) - primal_value`; nonnegative up to rounding by weak duality.
pub fn duality_gap(
    oracle: &OracleSolution,
    nu: &Array1<f64>,
    lambda: Option<f64>,
    problem: &ExactProblem,
) -> Result<f64> {
    Ok(dual_value(nu, lambda, problem)? - oracle.primal_value)
}

/// Primal optimum recorded in a fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPrimal {
    pub alpha: f64,
    pub undiscounted: bool,
    pub value: f64,
}

/// Small random MDP with exact expert and union occupancies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub seed: u64,
    pub mdp: MdpDocument,
    pub expert_policy: Vec<Vec<f64>>,
    pub rho_e: Vec<Vec<f64>>,
    pub rho_o: Vec<Vec<f64>>,
    pub primal: Vec<StoredPrimal>,
}

pub const FIXTURE_COUNT: usize = 20;
pub const FIXTURE_ALPHAS: [f64; 3] = [0.5, 1.0, 2.0];
/// Share of expert data in the union.
const EXPERT_SHARE: f64 = 0.2;

impl Fixture {
    pub fn tabular_mdp(&self) -> Result<TabularMdp> {
        TabularMdp::from_document(&self.mdp)
    }

    fn table(rows: &[Vec<f64>], n_a: usize) -> Result<EmpiricalDistribution> {
        EmpiricalDistribution::from_table(mdp::rows_to_table(rows, n_a)?)
    }

    pub fn expert_distribution(&self) -> Result<EmpiricalDistribution> {
        Self::table(&self.rho_e, self.mdp.n_actions)
    }

    pub fn union_distribution(&self) -> Result<EmpiricalDistribution> {
        Self::table(&self.rho_o, self.mdp.n_actions)
    }

    /// Saddle-point problem with reward `alpha log(d / (1 - d))` from the
    /// closed-form discriminator.
    pub fn problem(&self, alpha: f64, undiscounted: bool) -> Result<ExactProblem> {
        let (rho_e, rho_o) = (self.expert_distribution()?, self.union_distribution()?);
        let d = fit_discriminator_closed_form(&rho_e, &rho_o)?;
        let reward = auxiliary_reward(&d, self.mdp.n_states, self.mdp.n_actions, alpha, 0.0)?;
        ExactProblem::new(&self.tabular_mdp()?, &rho_o, &reward, undiscounted)
    }

    pub fn stored_primal(&self, alpha: f64, undiscounted: bool) -> Option<f64> {
        self.primal
            .iter()
            .find(|p| p.alpha == alpha && p.undiscounted == undiscounted)
            .map(|p| p.value)
    }
}

/// Deterministic fixture `index`. Sizes and discounts cycle through
/// `|S| in {2,3,5}`, `|A| in {2,3}`, `gamma in {0.9, 0.99}`. The expert is a
/// softmax policy and the supplementary data uniform. The expert table is the
/// expert occupancy with multiplicative noise, standing in for estimation
/// error, so it is generally not itself feasible. Draws are rejected until the
/// optimal discriminator stays strictly inside the default clip.
pub fn generate_fixture(index: usize) -> Result<Fixture> {
    let sizes = [2usize, 3, 5];
    let n_s = sizes[index % 3];
    let n_a = 2 + (index / 3) % 2;
    let gamma = if (index / 6).is_multiple_of(2) { 0.9 } else { 0.99 };
    let seed = 1000 + index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = ClipBounds::default();
    loop {
        let mdp = TabularMdp::random(n_s, n_a, gamma, &mut rng)?.with_reward(None)?;
        let logits = Array2::from_shape_fn((n_s, n_a), |_| rng.random_range(-1.5..1.5));
        let expert = TabularPolicy::softmax(&logits);
        let exact_e = stationary_distribution(&mdp, &expert)?.into_table();
        let noisy = exact_e.mapv(|p| p * rng.random_range(0.6..1.4));
        let rho_e = &noisy / noisy.sum();
        let rho_s = stationary_distribution(&mdp, &TabularPolicy::uniform(n_s, n_a))?.into_table();
        let rho_o = &rho_e * EXPERT_SHARE + &rho_s * (1.0 - EXPERT_SHARE);
        let margin = 0.02;
        let inside = rho_e
            .iter()
            .zip(rho_o.iter())
            .all(|(e, o)| (clip.lo + margin..=clip.hi - margin).contains(&(e / (e + o))));
        if !inside {
            continue;
        }
        let mut fixture = Fixture {
            name: format!("fixture_{index:02}"),
            seed,
            mdp: mdp.to_document(),
            expert_policy: expert.to_rows(),
            rho_e: mdp::table_to_rows(&rho_e),
            rho_o: mdp::table_to_rows(&rho_o),
            primal: Vec::new(),
        };
        for undiscounted in [false, true] {
            for alpha in FIXTURE_ALPHAS {
                let problem = fixture.problem(alpha, undiscounted)?;
                let value = primal_brute_force(&problem, 1e-9)?.primal_value;
                fixture.primal.push(StoredPrimal {
                    alpha,
                    undiscounted,
                    value,
                });
            }
        }
        return Ok(fixture);
    }
}

macro_rules! shipped {
    ($($n:literal),*) => {
        [$(include_str!(concat!("../fixtures/fixture_", $n, ".json"))),*]
    };
}

const SHIPPED: [&str; FIXTURE_COUNT] = shipped!(
    "00", "01", "02", "03", "04", "05", "06", "07", "08", "09", "10", "11", "12", "13", "14", "15", "16", "17", "18",
    "19"
);

/// The fixture suite bundled with the crate.
pub fn shipped_fixtures() -> Result<Vec<Fixture>> {
    SHIPPED.iter().map(|text| Ok(serde_json::from_str(text)?)).collect()
}
