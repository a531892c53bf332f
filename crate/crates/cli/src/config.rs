//! Flat `key = value` run configuration over the library's config types.
//!
//! Keys are the dotted paths of the serialized [`RunConfig`]. Values take the
//! type of the default they replace; lists are comma separated and `none`
//! clears an optional value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dualimit::finetune::GailConfig;
use dualimit::offrl::OffRlConfig;
use dualimit::pipeline::{GridExperiment, OfflineConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

/// Seeds of the nested configs are derived from the top-level `seed`.
const DERIVED_KEYS: [&str; 5] = [
    "data.seed",
    "gail.seed",
    "gail.disc_init",
    "offline.ssp.seed",
    "offrl.ssp.seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningSettings {
    /// Finetuning seeds; each runs a stitched and a random arm.
    pub seeds: Vec<u64>,
    pub window: usize,
    pub rollout_aligned_episodes: Option<usize>,
    pub rollout_aligned_steps: usize,
}

impl Default for UnlearningSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            window: 5,
            rollout_aligned_episodes: None,
            rollout_aligned_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GridExperiment,
    pub offline: OfflineConfig,
    pub gail: GailConfig,
    pub unlearning: UnlearningSettings,
    pub offrl: OffRlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = GridExperiment::default();
        Self {
            seed: 0,
            gail: data.gail_config(),
            offline: OfflineConfig {
                discount: data.grid.discount,
                ..Default::default()
            },
            offrl: OffRlConfig {
                discount: data.grid.discount,
                ..Default::default()
            },
            data,
            unlearning: UnlearningSettings::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            pairs.extend(parse_pairs(&text).with_context(|| format!("in config {}", path.display()))?);
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut flat = flatten(&serde_json::to_value(Self::default())?);
        for (key, raw) in pairs {
            let slot = flat.get_mut(key).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
            *slot = parse_like(slot, raw).with_context(|| format!("value for `{key}`"))?;
        }
        let mut cfg: Self = serde_json::from_value(unflatten(&flat)).context("assembling configuration")?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        self.data.seed = self.seed;
        self.gail.seed = self.seed;
        self.offline.ssp.seed = self.seed;
        self.offrl.ssp.seed = self.seed;
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.propagate_seed();
        cfg
    }

    /// Sorted `key = value` lines that load back into the same config.
    pub fn resolved(&self) -> Result<String> {
        let flat = flatten(&serde_json::to_value(self)?);
        Ok(flat.iter().map(|(k, v)| format!("{k} = {}\n", render(v))).collect())
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.resolved"), self.resolved()?)?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.data.grid.width * self.data.grid.height
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            _ => {
                if !DERIVED_KEYS.contains(&prefix) {
                    out.insert(prefix.to_string(), value.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config paths never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    // Derived keys still have to deserialize; they are overwritten afterwards.
    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    for key in DERIVED_KEYS {
        let parts: Vec<&str> = key.split('.').collect();
        let mut src = &defaults;
        for p in &parts {
            src = &src[*p];
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("object");
        }
        node.insert(parts[parts.len() - 1].to_string(), src.clone());
    }
    Value::Object(root)
}

fn parse_scalar(template: &Value, raw: &str) -> Result<Value> {
    Ok(match template {
        Value::Bool(_) => Value::Bool(
            raw.parse()
                .map_err(|_| anyhow!("expected true or false, got `{raw}`"))?,
        ),
        Value::Number(n) if n.is_u64() => Value::from(
            raw.parse::<u64>()
                .map_err(|_| anyhow!("expected a nonnegative integer, got `{raw}`"))?,
        ),
        Value::Number(n) if n.is_i64() => Value::from(
            raw.parse::<i64>()
                .map_err(|_| anyhow!("expected an integer, got `{raw}`"))?,
        ),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| anyhow!("expected a number, got `{raw}`"))?;
            Value::Number(Number::from_f64(x).ok_or_else(|| anyhow!("`{raw}` is not finite"))?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => parse_untyped(raw),
    })
}

fn parse_untyped(raw: &str) -> Value {
    if let Ok(n) = raw.parse::<u64>() {
        Value::from(n)
    } else if let Some(x) = raw.parse::<f64>().ok().and_then(Number::from_f64) {
        Value::Number(x)
    } else {
        Value::String(raw.to_string())
    }
}

fn parse_like(template: &Value, raw: &str) -> Result<Value> {
    if raw.eq_ignore_ascii_case("none") {
        if template.is_null() {
            return Ok(Value::Null);
        }
        bail!("`none` is only valid for optional keys");
    }
    match template {
        Value::Array(items) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            let elems = match items.first() {
                // Fixed-size pairs keep their element types.
                Some(_) if items.len() == 2 && parts.len() == 2 => {
                    vec![parse_scalar(&items[0], parts[0])?, parse_scalar(&items[1], parts[1])?]
                }
                Some(first) => parts.iter().map(|p| parse_scalar(first, p)).collect::<Result<_>>()?,
                None => parts.iter().map(|p| parse_untyped(p)).collect(),
            };
            Ok(Value::Array(elems))
        }
        _ => parse_scalar(template, raw),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}
