//! Denoising score matching and its gap to explicit score matching.

use super::schedule::NoiseSchedule;
use super::score::{GaussianPrior, GaussianScore, ScoreFunction, Scorer};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Rng, Tensor, Var};

/// Random inputs of one denoising-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DsmDraw {
    /// One step in `1..=N` per row.
    pub steps: Vec<usize>,
    /// `[B, k]` standard-normal noise.
    pub eps: Tensor,
}

impl DsmDraw {
    /// Uniform steps, then noise, drawn in that order.
    pub fn sample(rng: &mut Rng, sched: &NoiseSchedule, rows: usize, k: usize) -> Self {
        let steps = (0..rows).map(|_| 1 + rng.index(sched.steps())).collect();
        DsmDraw {
            steps,
            eps: rng.normal_tensor(&[rows, k]),
        }
    }
}

/// Per-row terms `w_i ‖s(z_i, i) − ∇log q(z_i | z_0)‖²` as a `[B]` variable,
/// with `z_i = √ᾱ_i z_0 + √(1 − ᾱ_i) ε` built on the graph so gradients
/// reach `z0`.
pub fn dsm_terms(g: &Graph, f: &dyn ScoreFunction, z0: Var, sched: &NoiseSchedule, draw: &DsmDraw) -> Result<Var> {
    let shape = g.shape(z0);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("dsm_loss", format!("need a non-empty [B, k] batch, got {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    if draw.steps.len() != b || draw.eps.shape() != [b, k] {
        return Err(Error::shape("dsm_loss", &shape, draw.eps.shape()));
    }
    for &i in &draw.steps {
        sched.check_step("dsm_loss", i)?;
    }
    let ab: Vec<f64> = draw.steps.iter().map(|&i| sched.alpha_bar(i)).collect();
    let col = |f: &dyn Fn(f64) -> f64| Tensor::new(&[b, 1], ab.iter().map(|&a| f(a)).collect());
    let noise: Vec<f64> = draw
        .eps
        .data()
        .iter()
        .enumerate()
        .map(|(c, e)| e * (1.0 - ab[c / k]).sqrt())
        .collect();
    let noise = Tensor::new(&[b, k], noise)?;
    let zi = g.add(g.mul(z0, g.input(col(&|a| a.sqrt())?))?, g.input(noise))?;
    let t: Vec<f64> = draw.steps.iter().map(|&i| i as f64).collect();
    let s = f.score(g, zi, &t)?;
    let target: Vec<f64> = draw
        .eps
        .data()
        .iter()
        .enumerate()
        .map(|(c, e)| -e / (1.0 - ab[c / k]).sqrt())
        .collect();
    let r = g.sub(s, g.input(Tensor::new(&[b, k], target)?))?;
    let per_row = g.sum_axis(g.square(r)?, 1)?;
    let w: Vec<f64> = draw.steps.iter().map(|&i| sched.weight(i)).collect();
    g.mul(per_row, g.input(Tensor::new(&[b], w)?))
}

/// Batch mean of [`dsm_terms`] under a fresh [`DsmDraw`].
pub fn dsm_loss(g: &Graph, f: &dyn ScoreFunction, z0: Var, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(z0);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("dsm_loss", format!("need a non-empty [B, k] batch, got {shape:?}")));
    }
    let draw = DsmDraw::sample(rng, sched, shape[0], shape[1]);
    g.mean(dsm_terms(g, f, z0, sched, &draw)?)
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub trials: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Estimate {
            mean,
            std_err: (var / n).sqrt(),
            trials: xs.len(),
        }
    }
}

/// Estimates `E[w_i ‖s − ∇log q(z_i|z_0)‖²] − E[w_i ‖s − ∇log q_i(z_i)‖²]`
/// for `z_0` drawn from an explicit Gaussian `prior`, whose diffused score is
/// known in closed form. The difference does not depend on `s`.
pub fn dsm_esm_gap(
    scorer: Scorer<'_>,
    prior: &GaussianPrior,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    trials: usize,
) -> Result<Estimate> {
    let prior = GaussianPrior::new(prior.mean.clone(), prior.var.clone())?;
    if trials < 2 {
        return Err(Error::invalid("dsm_esm_gap", "need at least two trials"));
    }
    let k = prior.dim();
    if scorer.f.latent_dim() != k {
        return Err(Error::shape("dsm_esm_gap", &[scorer.f.latent_dim()], &[k]));
    }
    let oracle = GaussianScore::new(prior.clone(), sched.clone());
    let mut diffs = Vec::with_capacity(trials);
    const CHUNK: usize = 8192;
    let mut left = trials;
    while left > 0 {
        let b = left.min(CHUNK);
        left -= b;
        let z0 = prior.sample(rng, b);
        let draw = DsmDraw::sample(rng, sched, b, k);
        let mut zi = Vec::with_capacity(b * k);
        let mut cond = Vec::with_capacity(b * k);
        for r in 0..b {
            let ab = sched.alpha_bar(draw.steps[r]);
            for j in 0..k {
                let e = draw.eps.data()[r * k + j];
                zi.push(ab.sqrt() * z0.data()[r * k + j] + (1.0 - ab).sqrt() * e);
                cond.push(-e / (1.0 - ab).sqrt());
            }
        }
        let zi = Tensor::new(&[b, k], zi)?;
        let t: Vec<f64> = draw.steps.iter().map(|&i| i as f64).collect();
        let s = scorer.eval(&zi, &t)?;
        let marg = oracle.score_tensor(&zi, &t);
        for r in 0..b {
            let w = sched.weight(draw.steps[r]);
            let (mut dsm, mut esm) = (0.0, 0.0);
            for j in 0..k {
                let c = r * k + j;
                dsm += (s.data()[c] - cond[c]).powi(2);
                esm += (s.data()[c] - marg.data()[c]).powi(2);
            }
            diffs.push(w * (dsm - esm));
        }
    }
    Ok(Estimate::from_samples(&diffs))
}
