pub mod attention;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod numeric;
pub mod model;
pub mod sampler;

pub use error::{Error, Result};
