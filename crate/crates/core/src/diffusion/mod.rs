//! Variance-preserving latent diffusion: schedule, noising kernels, score
//! models and denoising score matching.

mod loss;
mod perturb;
mod schedule;
mod score;

pub use loss::{dsm_esm_gap, dsm_loss, dsm_terms, DsmDraw, Estimate};
pub use perturb::{closed_form_score, perturb_marginal, perturb_step};
pub use schedule::{make_schedule, Interpolation, NoiseSchedule, ScheduleSpec, Weighting};
pub use score::{
    ConditionalScore, GaussianPrior, GaussianScore, ScoreConfig, ScoreFunction, ScoreKind, ScoreNet,
    Scorer, ZeroScore, TIME_EMBED,
};
