//! Loss terms shared by the dual and plain-VAE objectives.

use serde::{Deserialize, Serialize};

use super::config::LossWeights;
use crate::attention::Encoder;
use crate::data::Batch;
use crate::error::Result;
use crate::numeric::{Graph, Tensor, Var};

use super::decoder::Decoder;

/// Scalar loss terms. `total = w_recon·recon + w_score·score + kl`;
/// `prior_const` is the `k/2·ln(2πe σ_1²)` offset of the score-matching
/// bound, reported but never optimized or added to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub score: f64,
    pub kl: f64,
    pub prior_const: f64,
    pub total: f64,
}

impl LossReport {
    pub fn scaled(self, c: f64) -> Self {
        LossReport {
            recon: self.recon * c,
            score: self.score * c,
            kl: self.kl * c,
            prior_const: self.prior_const * c,
            total: self.total * c,
        }
    }

    pub fn plus(self, o: LossReport) -> Self {
        LossReport {
            recon: self.recon + o.recon,
            score: self.score + o.score,
            kl: self.kl + o.kl,
            prior_const: self.prior_const + o.prior_const,
            total: self.total + o.total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.score, self.kl, self.total].iter().all(|v| v.is_finite())
    }
}

/// Graph handles of the loss terms; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub score: Option<Var>,
    pub kl: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph, prior_const: f64) -> Result<LossReport> {
        Ok(LossReport {
            recon: g.scalar(self.recon)?,
            score: self.score.map(|v| g.scalar(v)).transpose()?.unwrap_or(0.0),
            kl: self.kl.map(|v| g.scalar(v)).transpose()?.unwrap_or(0.0),
            prior_const,
            total: g.scalar(self.total)?,
        })
    }
}

/// Batch mean of `½ Σ mask ⊙ (y − ŷ)²`: the unit-variance Gaussian negative
/// log-likelihood without its constant.
pub fn recon_term(g: &Graph, y_hat: Var, y: &Tensor, mask: &Tensor) -> Result<Var> {
    let b = y.shape()[0] as f64;
    let d = g.sub(y_hat, g.input(y.clone()))?;
    let sq = g.mul(g.square(d)?, g.input(mask.clone()))?;
    g.mul_scalar(g.sum(sq)?, 0.5 / b)
}

/// Batch mean of `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_standard_normal(g: &Graph, mu: Var, sigma: Var) -> Result<Var> {
    let b = g.shape(mu)[0] as f64;
    let t = g.add(g.square(mu)?, g.square(sigma)?)?;
    let t = g.sub(t, g.mul_scalar(g.log(sigma)?, 2.0)?)?;
    let t = g.add_scalar(t, -1.0)?;
    g.mul_scalar(g.sum(t)?, 0.5 / b)
}

/// `z = μ + σ ⊙ ε` from an encoder pass; returns `(μ, σ, z)`.
pub fn posterior_sample(g: &Graph, encoder: &Encoder, x: &Tensor, eps: &Tensor) -> Result<(Var, Var, Var)> {
    let (mu, sigma) = encoder.forward(g, g.input(x.clone()))?;
    let z = g.add(mu, g.mul(sigma, g.input(eps.clone()))?)?;
    Ok((mu, sigma, z))
}

/// Negative ELBO of the plain VAE: reconstruction of the horizon from the
/// posterior sample plus the closed-form KL to N(0, I).
pub fn elbo_vanilla(
    g: &Graph,
    encoder: &Encoder,
    decoder: &Decoder,
    batch: &Batch,
    eps: &Tensor,
    weights: LossWeights,
) -> Result<LossVars> {
    let (mu, sigma, z) = posterior_sample(g, encoder, &batch.x, eps)?;
    elbo_tail(g, decoder, batch, mu, sigma, z, weights)
}

pub(crate) fn elbo_tail(
    g: &Graph,
    decoder: &Decoder,
    batch: &Batch,
    mu: Var,
    sigma: Var,
    z: Var,
    weights: LossWeights,
) -> Result<LossVars> {
    let y_hat = decoder.forward(g, z)?;
    let recon = recon_term(g, y_hat, &batch.y, &batch.y_mask)?;
    let kl = kl_standard_normal(g, mu, sigma)?;
    let total = g.add(g.mul_scalar(recon, weights.recon)?, kl)?;
    Ok(LossVars {
        recon,
        score: None,
        kl: Some(kl),
        total,
    })
}
