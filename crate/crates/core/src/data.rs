//! Transition datasets with expert/supplementary provenance, empirical
//! state-action distributions and the JSONL on-disk format.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{sample_index, TabularMdp, TabularPolicy};

/// Where a transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "e")]
    Expert,
    #[serde(rename = "s")]
    Supplementary,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Expert => write!(f, "expert"),
            Source::Supplementary => write!(f, "supplementary"),
        }
    }
}

/// A state or action: a tabular index or a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obs {
    Index(usize),
    Vector(Vec<f64>),
}

impl Obs {
    pub fn index(&self) -> Result<usize> {
        match self {
            Obs::Index(i) => Ok(*i),
            Obs::Vector(_) => Err(Error::invalid("expected a tabular index, found a feature vector")),
        }
    }

    fn kind(&self) -> ObsKind {
        match self {
            Obs::Index(_) => ObsKind::Index,
            Obs::Vector(v) => ObsKind::Vector(v.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ObsKind {
    Index,
    Vector(usize),
}

/// One `(s, a, s')` record. Field names follow the JSONL schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    #[serde(rename = "s")]
    pub state: Obs,
    #[serde(rename = "a")]
    pub action: Obs,
    #[serde(rename = "sn")]
    pub next_state: Obs,
    #[serde(rename = "start")]
    pub is_episode_start: bool,
    #[serde(rename = "src")]
    pub source: Source,
    #[serde(rename = "r", default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

impl Transition {
    pub fn tabular(s: usize, a: usize, next: usize, start: bool, source: Source) -> Self {
        Self {
            state: Obs::Index(s),
            action: Obs::Index(a),
            next_state: Obs::Index(next),
            is_episode_start: start,
            source,
            reward: None,
        }
    }

    pub fn indices(&self) -> Result<(usize, usize, usize)> {
        Ok((self.state.index()?, self.action.index()?, self.next_state.index()?))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub policy_tag: Option<String>,
    pub horizon: Option<usize>,
}

/// Ordered transitions plus generation metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(transitions: Vec<Transition>) -> Self {
        Self {
            transitions,
            meta: DatasetMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn count(&self, source: Source) -> usize {
        self.transitions.iter().filter(|t| t.source == source).count()
    }

    pub fn filter(&self, source: Source) -> Dataset {
        Dataset {
            transitions: self
                .transitions
                .iter()
                .filter(|t| t.source == source)
                .cloned()
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Iterator over the tabular `(s, a, s')` triples.
    pub fn indexed(&self) -> impl Iterator<Item = Result<(usize, usize, usize)>> + '_ {
        self.transitions.iter().map(Transition::indices)
    }

    /// Checks every index against the MDP's dimensions.
    pub fn validate_tabular(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for (i, t) in self.transitions.iter().enumerate() {
            let (s, a, s2) = t.indices()?;
            if s >= n_states || s2 >= n_states || a >= n_actions {
                return Err(Error::invalid(format!("transition {i} ({s}, {a}, {s2}) out of range")));
            }
        }
        Ok(())
    }

    fn kinds(&self) -> Option<(ObsKind, ObsKind)> {
        self.transitions.first().map(|t| (t.state.kind(), t.action.kind()))
    }
}

/// Rolls out `n_traj` episodes of `horizon` steps from `mu`. Rewards are
/// recorded whenever the MDP carries a reward table.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_traj: usize,
    horizon: usize,
    seed: u64,
    source: Source,
) -> Result<Dataset> {
    if n_traj == 0 || horizon == 0 {
        return Err(Error::invalid("n_traj and horizon must be at least 1"));
    }
    if policy.probs().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::shape(
            format!("[{}, {}]", mdp.n_states(), mdp.n_actions()),
            format!("{:?}", policy.probs().dim()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_traj * horizon);
    for _ in 0..n_traj {
        let mut s = sample_index(mdp.initial().iter().copied(), &mut rng);
        for h in 0..horizon {
            let a = policy.sample(s, &mut rng);
            let next = sample_index(mdp.successors(s, a).iter().map(|&(_, p)| p), &mut rng);
            let next = mdp.successors(s, a)[next].0;
            let mut t = Transition::tabular(s, a, next, h == 0, source);
            t.reward = mdp.reward().map(|r| r[[s, a]]);
            transitions.push(t);
            s = next;
        }
    }
    Ok(Dataset {
        transitions,
        meta: DatasetMeta {
            seed: Some(seed),
            policy_tag: Some(source.to_string()),
            horizon: Some(horizon),
        },
    })
}

/// Counting options for [`EmpiricalDistribution::from_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Additive mass per cell before normalization.
    pub smoothing: f64,
    /// Weight the h-th step of an episode by `discount^h` instead of 1.
    pub discount_weighting: Option<f64>,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            smoothing: 0.0,
            discount_weighting: None,
        }
    }
}

/// Normalized state-action visit frequencies of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    probs: Array2<f64>,
    support: Array2<bool>,
}

impl EmpiricalDistribution {
    /// Wraps a nonnegative table, normalizing it to sum one.
    pub fn from_table(table: Array2<f64>) -> Result<Self> {
        if table.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("distribution table must be finite and nonnegative"));
        }
        let total = table.sum();
        if total <= 0.0 {
            return Err(Error::Empty("distribution has no mass".into()));
        }
        let probs = table.mapv(|x| x / total);
        let support = probs.mapv(|x| x > 0.0);
        Ok(Self { probs, support })
    }

    /// Visit frequencies of the transitions tagged `filter` (all when `None`).
    pub fn from_dataset(
        dataset: &Dataset,
        filter: Option<Source>,
        n_states: usize,
        n_actions: usize,
        options: CountOptions,
    ) -> Result<Self> {
        let mut counts = Array2::<f64>::zeros((n_states, n_actions));
        let mut raw = Array2::<bool>::from_elem((n_states, n_actions), false);
        let mut any = false;
        let mut weight = 1.0;
        for t in &dataset.transitions {
            if t.is_episode_start {
                weight = 1.0;
            }
            if filter.is_none_or(|src| src == t.source) {
                let (s, a) = (t.state.index()?, t.action.index()?);
                if s >= n_states || a >= n_actions {
                    return Err(Error::invalid(format!("pair ({s}, {a}) out of range")));
                }
                counts[[s, a]] += weight;
                raw[[s, a]] = true;
                any = true;
            }
            if let Some(gamma) = options.discount_weighting {
                weight *= gamma;
            }
        }
        if !any {
            return Err(Error::Empty(format!("no transitions match filter {filter:?}")));
        }
        if options.smoothing > 0.0 {
            counts.mapv_inplace(|c| c + options.smoothing);
        }
        let total = counts.sum();
        let probs = counts.mapv(|c| c / total);
        let support = if options.smoothing > 0.0 {
            probs.mapv(|p| p > 0.0)
        } else {
            raw
        };
        Ok(Self { probs, support })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn support(&self) -> &Array2<bool> {
        &self.support
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    pub fn l1_distance(&self, other: &Array2<f64>) -> f64 {
        self.probs.iter().zip(other.iter()).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Union `D_o = D_e ∪ D_s`, keeping provenance tags.
pub fn merge_datasets(expert: &Dataset, supplementary: &Dataset) -> Result<Dataset> {
    if let (Some(a), Some(b)) = (expert.kinds(), supplementary.kinds()) {
        if a != b {
            return Err(Error::invalid(format!(
                "incompatible state/action kinds: {a:?} vs {b:?}"
            )));
        }
    }
    let mut transitions = expert.transitions.clone();
    transitions.extend(supplementary.transitions.iter().cloned());
    Ok(Dataset {
        transitions,
        meta: DatasetMeta {
            seed: expert.meta.seed,
            policy_tag: Some("union".into()),
            horizon: expert.meta.horizon.or(supplementary.meta.horizon),
        },
    })
}

/// Empirical distribution of episode-start states.
pub fn estimate_initial_distribution(dataset: &Dataset, n_states: usize) -> Result<Array1<f64>> {
    let mut counts = Array1::<f64>::zeros(n_states);
    for t in dataset.transitions.iter().filter(|t| t.is_episode_start) {
        let s = t.state.index()?;
        if s >= n_states {
            return Err(Error::invalid(format!("start state {s} out of range")));
        }
        counts[s] += 1.0;
    }
    let total = counts.sum();
    if total == 0.0 {
        return Err(Error::Empty("dataset has no episode starts".into()));
    }
    Ok(counts.mapv(|c| c / total))
}

/// Writes one JSON transition per line.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for t in &dataset.transitions {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL dataset. Blank lines are skipped; a malformed line fails
/// with its 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut transitions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transition = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        transitions.push(t);
    }
    if transitions.is_empty() {
        return Err(Error::Empty(format!("{} contains no transitions", path.display())));
    }
    Ok(Dataset::new(transitions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, value_iteration, GridSpec};
    use ndarray::Array3;

    fn one_state() -> TabularMdp {
        TabularMdp::new(Array3::ones((1, 1, 1)), Array1::ones(1), 0.9, None).unwrap()
    }

    #[test]
    fn single_state_rollout() {
        let ds = sample_trajectories(&one_state(), &TabularPolicy::uniform(1, 1), 1, 3, 0, Source::Expert).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.transitions.iter().all(|t| t.indices().unwrap() == (0, 0, 0)));
        let starts: Vec<bool> = ds.transitions.iter().map(|t| t.is_episode_start).collect();
        assert_eq!(starts, vec![true, false, false]);
    }

    #[test]
    fn expert_reaches_goal_in_one_step() {
        let spec = GridSpec::new(2, 1, (1, 0), 0.0, 0.0);
        let mdp = build_gridworld(&spec).unwrap();
        let expert = value_iteration(&mdp, 1e-9).unwrap();
        let ds = sample_trajectories(&mdp, &expert, 10, 2, 4, Source::Expert).unwrap();
        for ep in ds.transitions.chunks(2) {
            assert_eq!(ep[0].indices().unwrap(), (0, 1, 1));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mdp = build_gridworld(&GridSpec::new(4, 4, (3, 3), 0.2, -0.01)).unwrap();
        let pi = TabularPolicy::uniform(16, 4);
        let a = sample_trajectories(&mdp, &pi, 5, 20, 11, Source::Supplementary).unwrap();
        let b = sample_trajectories(&mdp, &pi, 5, 20, 11, Source::Supplementary).unwrap();
        let text = |d: &Dataset| {
            d.transitions
                .iter()
                .map(|t| serde_json::to_string(t).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(text(&a), text(&b));
        assert!(sample_trajectories(&mdp, &pi, 0, 20, 11, Source::Expert).is_err());
    }

    #[test]
    fn empirical_counts() {
        let one = Dataset::new(vec![Transition::tabular(0, 1, 0, true, Source::Expert)]);
        let d = EmpiricalDistribution::from_dataset(&one, None, 2, 2, CountOptions::default()).unwrap();
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.probs().sum(), 1.0);

        let two = Dataset::new(vec![
            Transition::tabular(0, 1, 0, true, Source::Expert),
            Transition::tabular(1, 0, 0, false, Source::Expert),
        ]);
        let d = EmpiricalDistribution::from_dataset(&two, None, 2, 2, CountOptions::default()).unwrap();
        assert_eq!(d.get(0, 1), 0.5);
        assert_eq!(d.get(1, 0), 0.5);
        assert!(!d.support()[[0, 0]]);

        let none =
            EmpiricalDistribution::from_dataset(&two, Some(Source::Supplementary), 2, 2, CountOptions::default());
        assert!(matches!(none, Err(Error::Empty(_))));
    }

    #[test]
    fn smoothing_and_discount_weighting() {
        let ds = Dataset::new(vec![
            Transition::tabular(0, 0, 0, true, Source::Expert),
            Transition::tabular(0, 1, 0, false, Source::Expert),
        ]);
        let opts = CountOptions {
            smoothing: 0.0,
            discount_weighting: Some(0.5),
        };
        let d = EmpiricalDistribution::from_dataset(&ds, None, 1, 2, opts).unwrap();
        assert!((d.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        let opts = CountOptions {
            smoothing: 1.0,
            discount_weighting: None,
        };
        let d = EmpiricalDistribution::from_dataset(&ds, None, 2, 2, opts).unwrap();
        assert!(d.support().iter().all(|&b| b));
        assert!((d.get(1, 1) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn merge_counts_and_empty_supplement() {
        let e = Dataset::new(
            (0..3)
                .map(|i| Transition::tabular(i, 0, 0, i == 0, Source::Expert))
                .collect(),
        );
        let s = Dataset::new(
            (0..5)
                .map(|i| Transition::tabular(i, 1, 0, i == 0, Source::Supplementary))
                .collect(),
        );
        let u = merge_datasets(&e, &s).unwrap();
        assert_eq!(u.len(), 8);
        assert_eq!(u.count(Source::Expert), 3);
        assert_eq!(
            merge_datasets(&e, &Dataset::default()).unwrap().transitions,
            e.transitions
        );

        let mut v = s.clone();
        v.transitions[0].state = Obs::Vector(vec![0.0]);
        v.transitions.truncate(1);
        assert!(merge_datasets(&e, &v).is_err());
    }

    #[test]
    fn initial_distribution_from_starts() {
        let ds = Dataset::new(vec![
            Transition::tabular(0, 0, 1, true, Source::Expert),
            Transition::tabular(1, 0, 1, false, Source::Expert),
            Transition::tabular(1, 0, 1, true, Source::Expert),
            Transition::tabular(0, 0, 1, true, Source::Expert),
            Transition::tabular(1, 0, 1, true, Source::Expert),
        ]);
        assert_eq!(estimate_initial_distribution(&ds, 2).unwrap().to_vec(), vec![0.5, 0.5]);
        let mut no_starts = ds.clone();
        no_starts
            .transitions
            .iter_mut()
            .for_each(|t| t.is_episode_start = false);
        assert!(estimate_initial_distribution(&no_starts, 2).is_err());
    }

    #[test]
    fn jsonl_schema_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut t = Transition::tabular(2, 1, 3, true, Source::Expert);
        t.reward = Some(0.5);
        let ds = Dataset::new(vec![t, Transition::tabular(3, 0, 3, false, Source::Supplementary)]);
        write_jsonl(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"s":2,"a":1,"sn":3,"start":true,"src":"e","r":0.5}"#
        );
        assert_eq!(read_jsonl(&path).unwrap().transitions, ds.transitions);

        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Empty(_))));

        std::fs::write(
            &path,
            format!(
                "{}\n{{\"s\":1,\"a\":0,\"sn\":1,\"start\":true,\"src\":\"e\",\"x\":1}}\n",
                text.lines().next().unwrap()
            ),
        )
        .unwrap();
        match read_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn vector_observations_round_trip() {
        let t = Transition {
            state: Obs::Vector(vec![0.25, -1.0]),
            action: Obs::Vector(vec![0.5]),
            next_state: Obs::Vector(vec![0.0, 1.5]),
            is_episode_start: false,
            source: Source::Supplementary,
            reward: None,
        };
        let line = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Transition>(&line).unwrap(), t);
    }
}
