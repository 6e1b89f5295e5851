use serde::{Deserialize, Serialize};

use crate::attention::EncoderConfig;
use crate::diffusion::{ScheduleSpec, ScoreConfig};
use crate::error::{Error, Result};
use crate::sampler::SamplerSpec;

/// Weights of the reconstruction and score-matching terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { recon: 1.0, score: 1.0 }
    }
}

/// Architecture and objective of a [`DualVdt`](super::DualVdt).
///
/// `dual = false` skips fusion and decodes the posterior sample;
/// `score_prior = false` additionally swaps the score-matching prior for
/// N(0, I) with a closed-form KL, which is the plain VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub dual: bool,
    pub score_prior: bool,
    pub encoder: EncoderConfig,
    pub score: ScoreConfig,
    pub sampler: SamplerSpec,
    pub schedule: ScheduleSpec,
    pub loss_weights: LossWeights,
    pub fusion_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 8,
            dual: true,
            score_prior: true,
            encoder: EncoderConfig::default(),
            score: ScoreConfig::default(),
            sampler: SamplerSpec::default(),
            schedule: ScheduleSpec::default(),
            loss_weights: LossWeights::default(),
            fusion_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("model", "latent_dim must be positive"));
        }
        if self.fusion_width == 0 {
            return Err(Error::invalid("model", "fusion_width must be positive"));
        }
        if self.dual && !self.score_prior {
            return Err(Error::invalid("model", "dual fusion needs the score prior"));
        }
        let w = self.loss_weights;
        if !(w.recon >= 0.0 && w.score >= 0.0 && w.recon.is_finite() && w.score.is_finite()) {
            return Err(Error::invalid("model", "loss weights must be finite and non-negative"));
        }
        self.encoder.validate()?;
        let sched = self.schedule.build()?;
        self.sampler.validate(&sched)?;
        Ok(())
    }
}

/// Window geometry a model is built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub lookback: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; absent or 0 disables clipping.
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            optimizer: Optimizer::Adam,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is allowed (it leaves parameters untouched).
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train", "epochs and batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train", "lr must be finite and non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::invalid("train", "clip_norm must be finite and non-negative"));
            }
        }
        Ok(())
    }
}
