//! Local-temporal masks, dual-masked attention, and window encoders.

mod block;
mod encoder;
mod mask;

pub use block::{
    local_temporal_block, masked_attention, AttentionBranch, AttentionParams, Branch, EdgeTensors,
    HeadProj, ScaleMode,
};
pub use encoder::{Encoder, EncoderConfig, EncoderKind, PosteriorParams, SIGMA_FLOOR};
pub use mask::{build_masks, build_masks_capped, MaskPair, MAX_MASK_POSITIONS};

pub(crate) use block::{block_vars, csv_io};
pub(crate) use encoder::{sinusoid, LtEmbedding};
