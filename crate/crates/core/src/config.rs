//! Run configuration: TOML file, `key=value` overrides, presets and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{ingest_csv, synthesize, CsvSchema, DataError, DatasetConfig, RawSeries, SyntheticSpec};
use crate::forecaster::{DecodeMode, TrainConfig};

/// Relative output directories are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "PRONET_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("missing key `{0}`")]
    Missing(&'static str),
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Where the series come from; exactly one of `path` and `synthetic`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub schema: CsvSchema,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<RawSeries>, DataError> {
        match (&self.synthetic, &self.path) {
            (Some(spec), _) => Ok(synthesize(spec)),
            (None, Some(path)) => ingest_csv(path, &self.schema),
            (None, None) => Err(DataError::Empty),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub modes: Vec<DecodeMode>,
    pub runs: usize,
    /// Leading test windows decoded per run.
    pub windows: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                DecodeMode::Ar,
                DecodeMode::ProNet(2),
                DecodeMode::ProNet(5),
                DecodeMode::ProNet(10),
                DecodeMode::ProNet(15),
                DecodeMode::Nar,
            ],
            runs: 5,
            windows: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Horizons in steps; empty means the data horizon only.
    pub horizons: Vec<usize>,
    /// Empty means the run mode only.
    pub modes: Vec<DecodeMode>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Empty means AR, even-plan and learned-plan decoding with the run's group count.
    pub modes: Vec<DecodeMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture and learning-rate preset applied beneath `[model]` and `train.lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default = "default_mode")]
    pub mode: DecodeMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub data: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_mode() -> DecodeMode {
    DecodeMode::ProNet(12)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Reads `path`, applies `overrides` in order, then the preset, then validates.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        apply_preset(&mut root)?;
        let config: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (None, None) => return Err(ConfigError::Missing("dataset.path")),
            (Some(_), Some(_)) => {
                return Err(invalid("dataset", "set either `path` or `synthetic`, not both"))
            }
            (Some(p), None) if !p.is_file() => {
                return Err(invalid("dataset.path", format!("{} is not a readable file", p.display())))
            }
            _ => {}
        }
        if let Some(s) = &self.dataset.synthetic {
            if s.n_series == 0 || s.length == 0 || s.step_minutes <= 0 {
                return Err(invalid("dataset.synthetic", "n_series, length and step_minutes must be positive"));
            }
        }
        let d = &self.data;
        for (key, v) in [
            ("data.lookback", d.lookback),
            ("data.steps_per_day", d.steps_per_day),
            ("data.train_stride", d.train_stride),
            ("data.eval_stride", d.eval_stride),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if d.horizon < 2 {
            return Err(invalid("data.horizon", "must be at least 2"));
        }
        self.mode
            .fixed_plan(d.horizon)
            .map_err(|e| invalid("mode", e.to_string()))?;
        self.model_for(0, 0)
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        if t.max_epochs == 0 {
            return Err(invalid("train.max_epochs", "must be positive"));
        }
        if !(t.beta >= 0.0 && t.beta.is_finite()) {
            return Err(invalid("train.beta", "must be non-negative"));
        }
        if !(t.clip_norm >= 0.0) {
            return Err(invalid("train.clip_norm", "must be non-negative"));
        }
        if self.bench.runs == 0 || self.bench.windows == 0 {
            return Err(invalid("bench", "runs and windows must be positive"));
        }
        if self.bench.modes.is_empty() {
            return Err(invalid("bench.modes", "must not be empty"));
        }
        for m in &self.ablate.modes {
            m.fixed_plan(d.horizon)
                .map_err(|e| invalid("ablate.modes", e.to_string()))?;
        }
        if self.sweep.horizons.iter().any(|&h| h < 2) {
            return Err(invalid("sweep.horizons", "every horizon must be at least 2"));
        }
        Ok(())
    }

    /// `[model]` with the window lengths and dataset-derived widths filled in.
    pub fn model_for(&self, covariate_dim: usize, n_series: usize) -> ModelConfig {
        ModelConfig {
            lookback: self.data.lookback,
            horizon: self.data.horizon,
            covariate_dim,
            n_series: if self.data.series_embedding { n_series } else { 0 },
            ..self.model.clone()
        }
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }
}

/// Sets a dotted key; the value is parsed as a TOML value, else kept as a string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn apply_preset(root: &mut toml::Table) -> Result<(), ConfigError> {
    let Some(name) = root.get("preset") else {
        return Ok(());
    };
    let name = name
        .as_str()
        .ok_or_else(|| invalid("preset", "must be a string"))?;
    let (model, lr) = ModelConfig::preset(name)
        .ok_or_else(|| invalid("preset", format!("unknown preset `{name}`")))?;
    let toml::Value::Table(mut merged) =
        toml::Value::try_from(&model).map_err(|e| ConfigError::Parse(e.to_string()))?
    else {
        unreachable!("model configuration serializes to a table")
    };
    if let Some(user) = root.get("model") {
        let user = user.as_table().ok_or_else(|| invalid("model", "must be a table"))?;
        merged.extend(user.clone());
    }
    root.insert("model".into(), toml::Value::Table(merged));
    let train = root
        .entry("train")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| invalid("train", "must be a table"))?;
    train.entry("lr").or_insert(toml::Value::Float(lr));
    Ok(())
}
