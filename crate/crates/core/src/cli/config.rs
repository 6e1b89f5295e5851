//! The TOML run configuration shared by `train` and `ablate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, synth_sinusoids, CsvSchema, RawSeries, SplitRatios, ETT_TARGET};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Optimizer, PreparedData, TrainConfig};
use crate::numeric::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Used when `--seed` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Relative paths are taken from the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaMode {
    #[default]
    Ett,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Label used in ablation tables; defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// CSV file. Exactly one of `path` and `synthetic` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub schema: SchemaMode,
    /// Forecast target; required for `generic`, fixed to `OT` for `ett`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSection>,
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub split: SplitRatios,
}

fn one() -> usize {
    1
}

/// Noisy sinusoids generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub len: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n: 4,
            len: 400,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Training hyperparameters; the seed lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            clip_norm: t.clip_norm,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            optimizer: self.optimizer,
            clip_norm: self.clip_norm,
        }
    }
}

fn cfg_err(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {e}"))
}

/// Largest seed that survives a TOML round trip.
pub const MAX_SEED: u64 = i64::MAX as u64;

pub fn check_seed(seed: u64) -> Result<u64> {
    if seed > MAX_SEED {
        return Err(cfg_err("seed", format!("must be at most {MAX_SEED}")));
    }
    Ok(seed)
}

impl RunConfig {
    /// Parses TOML; unknown keys and type errors name the offending key path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, making relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        cfg.dataset.path = cfg.dataset.path.map(|p| base.join(p));
        cfg.output_dir = cfg.output_dir.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.seed {
            check_seed(s)?;
        }
        let d = &self.dataset;
        match (&d.path, &d.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(cfg_err("dataset", "set exactly one of `path` and `synthetic`")),
        }
        if d.lookback == 0 {
            return Err(cfg_err("dataset.lookback", "must be positive"));
        }
        if d.horizon == 0 {
            return Err(cfg_err("dataset.horizon", "must be positive"));
        }
        if d.stride == 0 {
            return Err(cfg_err("dataset.stride", "must be positive"));
        }
        d.split.validate().map_err(|e| cfg_err("dataset.split", e))?;
        if d.path.is_some() && d.schema == SchemaMode::Generic && d.target.is_none() {
            return Err(cfg_err("dataset.target", "required for the generic schema"));
        }
        if d.path.is_some() && d.schema == SchemaMode::Ett && d.target.as_deref().is_some_and(|t| t != ETT_TARGET) {
            return Err(cfg_err("dataset.target", format!("the ett schema forecasts `{ETT_TARGET}`")));
        }
        if let Some(s) = &d.synthetic {
            if s.n == 0 || s.len == 0 {
                return Err(cfg_err("dataset.synthetic", "n and len must be positive"));
            }
            if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
                return Err(cfg_err("dataset.synthetic.noise_std", "must be finite and non-negative"));
            }
        }
        self.model.validate().map_err(|e| cfg_err("model", e))?;
        self.train.with_seed(0).validate().map_err(|e| cfg_err("train", e))?;
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        if let Some(n) = &self.dataset.name {
            return n.clone();
        }
        match &self.dataset.path {
            Some(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
            None => "synthetic".into(),
        }
    }

    pub fn load_series(&self) -> Result<RawSeries> {
        let d = &self.dataset;
        match (&d.path, &d.synthetic) {
            (Some(p), _) => {
                let schema = match d.schema {
                    SchemaMode::Ett => CsvSchema::Ett,
                    SchemaMode::Generic => CsvSchema::Generic {
                        target: d.target.clone().unwrap_or_default(),
                    },
                };
                load_csv(p, &schema)
            }
            (None, Some(s)) => Ok(synth_sinusoids(&mut Rng::new(s.seed), s.n, s.len, s.noise_std)),
            (None, None) => Err(cfg_err("dataset", "no data source")),
        }
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        let d = &self.dataset;
        PreparedData::new(&self.load_series()?, self.dataset_name(), d.lookback, d.horizon, d.stride, d.split)
    }
}
