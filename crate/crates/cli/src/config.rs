//! Run configuration: `key = value` lines with dotted keys, applied on top of
//! the built-in defaults. A key that does not already exist in the default
//! tree is an error, which is how misspellings get caught.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tristream::config::{HeadKind, NetworkConfig};
use tristream::trainer::{SyntheticSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Detection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directories; when unset the synthetic generator is used.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub train_size: usize,
    pub test_size: usize,
    /// Squares per clip for detection data.
    pub objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// `train` or `test`.
    pub split: String,
    pub n_clips: usize,
    pub crop: Option<usize>,
    /// Detection proposals; ground-truth boxes when unset.
    pub proposals: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub shapes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub clip_len: usize,
    pub single_stride: usize,
    pub fast_stride: usize,
    pub slow_strides: Vec<usize>,
    pub heads: Vec<HeadKind>,
    pub betas: Vec<f64>,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub data: DataSection,
    pub model: NetworkConfig,
    /// `train.seed` is not settable; the run seed is copied in.
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Classification,
            data: DataSection {
                train: None,
                test: None,
                synthetic: SyntheticSpec::default(),
                train_size: 2000,
                test_size: 500,
                objects: 2,
            },
            model: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection {
                checkpoint: None,
                split: "test".into(),
                n_clips: 10,
                crop: None,
                proposals: None,
            },
            gradcheck: GradcheckSection { shapes: 20 },
            ablate: AblateSection {
                clip_len: 48,
                single_stride: 48,
                fast_stride: 2,
                slow_strides: vec![4, 6, 12, 16, 32],
                heads: vec![HeadKind::BiLstm, HeadKind::Attention, HeadKind::None],
                betas: vec![1.0, 0.25, 0.125],
                epochs: 1,
                train_size: 64,
                test_size: 32,
                synthetic: SyntheticSpec {
                    frames: 48,
                    object_size: 4,
                    speed: 0.25,
                    ..SyntheticSpec::default()
                },
            },
        }
    }
}

/// Splits config text into `(key, raw value)` pairs. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = vec![];
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {line:?}", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// JSON if it parses, `a/b` as a fraction, a comma list element-wise,
/// otherwise a bare string.
pub fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str(raw) {
        return v;
    }
    if let Some((a, b)) = raw.split_once('/') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            if let Some(n) = serde_json::Number::from_f64(a / b) {
                return Value::Number(n);
            }
        }
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|s| parse_value(s.trim())).collect());
    }
    Value::String(raw.to_string())
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let slot = node
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` overrides, then `--seed`.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut pairs = vec![];
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(parse_pairs(&text).with_context(|| format!("in {}", path.display()))?);
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {s:?}"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut tree = serde_json::to_value(Self::default())?;
        if let Some(t) = tree.get_mut("train").and_then(Value::as_object_mut) {
            t.remove("seed");
        }
        for (k, v) in &pairs {
            set_path(&mut tree, k, parse_value(v))?;
        }
        if let Some(s) = seed {
            tree["seed"] = s.into();
        }
        let run_seed = tree["seed"].clone();
        tree["train"]["seed"] = run_seed;
        let cfg: Self = serde_json::from_value(tree).context("invalid config value")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !matches!(self.eval.split.as_str(), "train" | "test") {
            bail!("eval.split must be `train` or `test`, got {:?}", self.eval.split);
        }
        if self.eval.n_clips == 0 {
            bail!("eval.n_clips must be >= 1");
        }
        Ok(())
    }
}
