//! Model assembly, objectives, training and inference.

mod ablate;
mod checkpoint;
mod config;
mod decoder;
mod dual;
mod fusion;
mod loss;
mod prepare;

pub use ablate::{ablation_cells, read_ablation_csv, run_ablation, write_ablation_csv, write_ablation_report, AblationCell, AblationRow, AblationSpec};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use config::{Dims, LossWeights, ModelConfig, Optimizer, TrainConfig};
pub use decoder::Decoder;
pub use dual::{DualVdt, LossDraws, Metrics, SeriesMeta};
pub use fusion::{dual_reparam_sample, FusionNets};
pub use loss::{elbo_vanilla, kl_standard_normal, posterior_sample, recon_term, LossReport, LossVars};
pub use prepare::{DataInfo, PreparedData};
