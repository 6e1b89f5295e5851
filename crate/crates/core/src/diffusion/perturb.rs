//! Forward noising kernels and the conditional score.

use super::schedule::NoiseSchedule;
use crate::error::Result;
use crate::numeric::{NoiseSource, Tensor};

/// One transition: `z_i = √(1 − σ_i²) z_{i−1} + σ_i ε`.
pub fn perturb_step(
    sched: &NoiseSchedule,
    z_prev: &Tensor,
    i: usize,
    noise: &mut impl NoiseSource,
) -> Result<Tensor> {
    sched.check_step("perturb_step", i)?;
    let s2 = sched.sigma_sq(i);
    let (a, b) = ((1.0 - s2).sqrt(), s2.sqrt());
    let eps = noise.normal(z_prev.shape());
    z_prev.zip_map(&eps, |z, e| a * z + b * e)
}

/// Single-shot marginal: `z_i = √ᾱ_i z_0 + √(1 − ᾱ_i) ε`; returns `(z_i, ε)`.
pub fn perturb_marginal(
    sched: &NoiseSchedule,
    z0: &Tensor,
    i: usize,
    noise: &mut impl NoiseSource,
) -> Result<(Tensor, Tensor)> {
    sched.check_step("perturb_marginal", i)?;
    let ab = sched.alpha_bar(i);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = noise.normal(z0.shape());
    let zi = z0.zip_map(&eps, |z, e| a * z + b * e)?;
    Ok((zi, eps))
}

/// `∇ log q(z_i | z_0) = −(z_i − √ᾱ_i z_0) / (1 − ᾱ_i)`.
pub fn closed_form_score(sched: &NoiseSchedule, zi: &Tensor, z0: &Tensor, i: usize) -> Result<Tensor> {
    sched.check_step("closed_form_score", i)?;
    let ab = sched.alpha_bar(i);
    let (a, v) = (ab.sqrt(), 1.0 - ab);
    zi.zip_map(z0, |z, z0| -(z - a * z0) / v)
}
