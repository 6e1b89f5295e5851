//! Differentiable-array substrate: dense tensors, a reverse-mode tape,
//! seeded randomness, layers, Adam, and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
mod nn;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Gradients, Graph, Var};
pub use nn::{Conv1d, Linear, Mlp};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use rng::{gaussian_sample, NoiseSource, Rng, RowNoise, ZeroNoise};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::softplus;
