#![allow(dead_code)]

use dualvdt::attention::{EncoderConfig, EncoderKind};
use dualvdt::data::{synth_sinusoids, SplitRatios};
use dualvdt::diffusion::{ScheduleSpec, ScoreConfig, ScoreKind};
use dualvdt::model::{ModelConfig, PreparedData};
use dualvdt::numeric::Rng;

/// A model small enough for finite differences.
pub fn tiny_config(encoder: EncoderKind, score: ScoreKind, dual: bool, score_prior: bool) -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        dual,
        score_prior,
        encoder: EncoderConfig {
            kind: encoder,
            width: 8,
            heads: 2,
            blocks: 1,
            kernel: 3,
            ..EncoderConfig::default()
        },
        score: ScoreConfig { kind: score, width: 8 },
        schedule: ScheduleSpec {
            steps: 5,
            sigma_sq_min: 0.01,
            sigma_sq_max: 0.2,
            ..ScheduleSpec::default()
        },
        fusion_width: 8,
        ..ModelConfig::default()
    }
}

/// Two noisy sinusoids, lookback 6, horizon 3.
pub fn tiny_data(seed: u64) -> PreparedData {
    let mut rng = Rng::new(seed);
    let s = synth_sinusoids(&mut rng, 2, 80, 0.05);
    PreparedData::new(&s, "synth", 6, 3, 1, SplitRatios::default()).unwrap()
}
