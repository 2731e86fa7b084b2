//! Declarative run configuration.
//!
//! One TOML file holds every knob a command needs: data paths, window
//! geometry, normalization, diffusion schedule, model preset, training,
//! sampling, evaluation, and the ablation step list. Command-line
//! overrides patch individual keys, and the SHA-256 hash of the resolved
//! configuration is stamped into every output file so results remain
//! traceable to their exact settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::book::WindowSpec;
use crate::diffusion::DiffusionSchedule;
use crate::metrics::EvalConfig;
use crate::nn::UNetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value with a dotted key")]
    BadOverride(String),
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Orderbook CSV, 4 columns per level.
    pub orderbook: String,
    /// Optional companion timestamp file (first column, seconds).
    pub times: Option<String>,
    /// Book depth per side.
    pub levels: usize,
    /// Trading-hours window in seconds after midnight.
    pub open: f64,
    pub close: f64,
    /// Drop states outside `[open, close)` before any processing.
    pub restrict_hours: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            orderbook: String::new(),
            times: None,
            levels: 4,
            open: 34_200.0,
            close: 57_600.0,
            restrict_hours: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub history_len: usize,
    pub pred_len: usize,
    /// Stride between evaluation windows; training strides by history_len.
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { history_len: 40, pred_len: 24, stride: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    /// Trailing column window for the price deviation statistic; whole
    /// statistics region when absent.
    pub rolling_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { t_diff: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `desk` (64x64 CPU-trainable) or `full` (256x256).
    pub preset: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: "desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Restrict the loss to future columns.
    pub future_only: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 4, lr: 1e-3, seed: 0, future_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Number of futures per run.
    pub count: usize,
    /// Reverse-process steps.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: 4, steps: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub depth: usize,
    pub mid_lag: usize,
    pub volume_level: usize,
    pub bins: usize,
    pub resamples: usize,
    pub ci_level: f64,
    pub seed: u64,
    pub bucket_count: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            depth: e.depth,
            mid_lag: e.mid_lag,
            volume_level: e.volume_level,
            bins: e.bins,
            resamples: e.resamples,
            ci_level: e.ci_level,
            seed: e.seed,
            bucket_count: e.bucket_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub steps: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { steps: vec![10, 50, 100, 200, 1000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Power-law limit-rate scale and exponent.
    pub k: f64,
    pub gamma: f64,
    pub market_rate: f64,
    pub cancel_rate: f64,
    pub order_size: i64,
    pub seed: u64,
    /// Initial symmetric book: mid price and per-level depth.
    pub init_mid: i64,
    pub init_depth: i64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            k: 1.0,
            gamma: 0.6,
            market_rate: 0.5,
            cancel_rate: 0.01,
            order_size: 10,
            seed: 0,
            init_mid: 1000,
            init_depth: 50,
        }
    }
}

/// Everything a run needs, resolved from file plus overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub window: WindowConfig,
    pub norm: NormConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub baseline: BaselineSection,
}

/// Splits `key=value`; the key may be dotted (`train.lr=0.01`).
pub fn parse_override(raw: &str) -> Result<(String, String), ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::BadOverride(raw.into()))?;
    let key = key.trim();
    if key.is_empty() || value.trim().is_empty() {
        return Err(ConfigError::BadOverride(raw.into()));
    }
    Ok((key.to_string(), value.trim().to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let mini = format!("x = {value}");
    let parsed: toml::Table = mini
        .parse()
        .or_else(|_| format!("x = {value:?}").parse())
        .map_err(|e| ConfigError::Parse(format!("value for {key}: {e}")))?;
    let value = parsed.get("x").cloned().expect("mini-doc key");
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{key}: `{part}` is not a table")))?;
    }
    unreachable!("split always yields at least one part");
}

impl RunConfig {
    /// Parses a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Loads the file (defaults when `path` is `None`) and applies
    /// `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match path {
            Some(p) => std::fs::read_to_string(p)?.parse().map_err(|e| ConfigError::Parse(format!("{e}")))?,
            None => toml::Table::new(),
        };
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            apply_override(&mut table, &key, &value)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical serialized form, hex-encoded. Outputs
    /// stamp this so any result traces back to its exact settings.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn window_spec(&self) -> Result<WindowSpec, ConfigError> {
        WindowSpec::new(self.window.history_len, self.window.pred_len, self.data.levels, self.window.stride)
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        DiffusionSchedule::linear(self.diffusion.t_diff, self.diffusion.beta_start, self.diffusion.beta_end)
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))
    }

    /// Model preset, cross-checked against the window geometry: the
    /// image side `history_len + pred_len` must equal the preset
    /// resolution.
    pub fn unet_config(&self) -> Result<UNetConfig, ConfigError> {
        let cfg = match self.model.preset.as_str() {
            "desk" => UNetConfig::desk(),
            "full" => UNetConfig::full(),
            other => return Err(ConfigError::Inconsistent(format!("unknown model preset `{other}`"))),
        };
        let side = self.window.history_len + self.window.pred_len;
        if side != cfg.resolution {
            return Err(ConfigError::Inconsistent(format!(
                "window history_len + pred_len = {side} but preset `{}` works on {}x{} images",
                self.model.preset, cfg.resolution, cfg.resolution
            )));
        }
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            depth: self.eval.depth,
            mid_lag: self.eval.mid_lag,
            volume_level: self.eval.volume_level,
            bins: self.eval.bins,
            resamples: self.eval.resamples,
            ci_level: self.eval.ci_level,
            seed: self.eval.seed,
            bucket_count: self.eval.bucket_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.window.history_len + cfg.window.pred_len, 64);
        cfg.window_spec().unwrap();
        cfg.schedule().unwrap();
        assert_eq!(cfg.unet_config().unwrap().resolution, 64);
        assert_eq!(cfg.eval_config(), EvalConfig::default());
    }

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn overrides_patch_keys_and_change_hash() {
        let base = RunConfig::load(None, &[]).unwrap();
        let patched = RunConfig::load(
            None,
            &["train.lr=0.01".into(), "data.levels=2".into(), "model.preset=full".into()],
        )
        .unwrap();
        assert_eq!(patched.train.lr, 0.01);
        assert_eq!(patched.data.levels, 2);
        assert_eq!(patched.model.preset, "full");
        assert_ne!(base.hash(), patched.hash());
        // Unquoted strings fall back to string parsing.
        let c = RunConfig::load(None, &["data.orderbook=path/to/book.csv".into()]).unwrap();
        assert_eq!(c.data.orderbook, "path/to/book.csv");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(RunConfig::from_toml("[window]\nhistory_len = \"forty\"").is_err());
        assert!(RunConfig::from_toml("[window]\nno_such_key = 1").is_err());
        assert!(RunConfig::load(None, &["train.lr".into()]).is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn full_preset_needs_matching_window() {
        let cfg = RunConfig::load(None, &["model.preset=full".into()]).unwrap();
        assert!(matches!(cfg.unet_config(), Err(ConfigError::Inconsistent(_))));
        let cfg = RunConfig::load(
            None,
            &["model.preset=full".into(), "window.history_len=160".into(), "window.pred_len=96".into()],
        )
        .unwrap();
        assert_eq!(cfg.unet_config().unwrap().resolution, 256);
    }
}
