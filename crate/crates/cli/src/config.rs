//! Run configurations: built-in defaults, overlaid by an optional JSON file,
//! then by dotted `key=value` overrides. Keys absent from the defaults are
//! rejected at every level.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use surrogate_core::dataio::{GenConfig, Split};
use surrogate_core::fields::Regime;
use surrogate_core::model::ModelConfig;
use surrogate_core::trainer::{InputView, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRun {
    pub gen: GenConfig,
    /// When set, one dataset per listed regime, each named after its regime.
    pub regimes: Option<Vec<Regime>>,
}

impl Default for GenRun {
    fn default() -> Self {
        Self { gen: GenConfig::desk(), regimes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Continue from the run directory's checkpoint if present.
    pub resume: bool,
    /// Stop early after this many updates.
    pub stop_at: Option<u64>,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            resume: true,
            stop_at: None,
        }
    }
}

/// Which weight set of a checkpoint to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Ema,
    Raw,
}

/// Shared by `eval` and `forces`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    /// Without a checkpoint only target values are reported.
    pub checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
    pub split: Split,
    /// Point sets the anchors are drawn from.
    pub input: InputView,
    pub weights: Weights,
    pub seed: u64,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: PathBuf::new(),
            split: Split::Test,
            input: InputView::Solution,
            weights: Weights::Ema,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRun {
    pub checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
    pub case_id: u64,
    /// Slice station as a fraction of the surface's y-extent.
    pub span_fraction: f64,
    /// Half-width of the slab of points kept around the station.
    pub band: f64,
    pub input: InputView,
    pub weights: Weights,
    pub seed: u64,
}

impl Default for SliceRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: PathBuf::new(),
            case_id: 0,
            span_fraction: 0.5,
            band: 0.05,
            input: InputView::Solution,
            weights: Weights::Ema,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRun {
    /// Without a checkpoint a freshly initialised `model` is timed.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    /// Query points per domain for each measurement.
    pub n_queries: Vec<usize>,
    /// Each row reports the fastest of this many runs.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::desk(),
            n_queries: vec![0, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384],
            repeats: 3,
            seed: 0,
        }
    }
}

/// Overlays `over` onto `base`. Objects merge key by key; anything else
/// replaces. `path` names the current position for error messages.
pub fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Config(format!("unknown key `{here}`")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// Applies `key.path=value`. The value is parsed as JSON, or taken as a
/// string when it is not valid JSON.
pub fn apply_override(base: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut nested = value;
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty segment in key `{key}`")));
        }
        nested = Value::Object([(part.to_string(), nested)].into_iter().collect());
    }
    merge(base, nested, "")
}

/// Defaults of `T`, overlaid by the file at `file` and then `overrides`.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, parsed, "")?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}
