//! Score functions: learned networks and closed-form Gaussian oracles.

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::attention::sinusoid;
use crate::error::{Error, Result};
use crate::numeric::{Conv1d, Graph, Mlp, ParamId, ParamStore, Rng, Tensor, Var};

/// A map `(z, t) ↦ ∇_z log q_t(z)` on `[B, k]` latents.
///
/// `t` holds one continuous time per row in step units: integer `i` is
/// diffusion step `i`, fractional values fall between steps.
pub trait ScoreFunction {
    fn latent_dim(&self) -> usize;

    fn score(&self, g: &Graph, z: Var, t: &[f64]) -> Result<Var>;
}

/// Tensor-level evaluation of a [`ScoreFunction`] against fixed parameters.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub f: &'a dyn ScoreFunction,
    pub params: &'a ParamStore,
}

impl<'a> Scorer<'a> {
    pub fn new(f: &'a dyn ScoreFunction, params: &'a ParamStore) -> Self {
        Scorer { f, params }
    }

    pub fn eval(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        let g = Graph::inference(self.params);
        let zv = g.input(z.clone());
        let s = self.f.score(&g, zv, t)?;
        Ok(g.value(s))
    }

    /// Same time for every row.
    pub fn eval_at(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let rows = z.shape().first().copied().unwrap_or(0);
        self.eval(z, &vec![t; rows])
    }
}

fn check_rows(op: &'static str, g: &Graph, z: Var, t: &[f64], k: usize) -> Result<usize> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[1] != k || shape[0] != t.len() {
        return Err(Error::shape(op, &shape, &[t.len(), k]));
    }
    Ok(shape[0])
}

/// Width of the sinusoidal time embedding.
pub const TIME_EMBED: usize = 16;

fn time_embedding(t: &[f64]) -> Tensor {
    let data = t
        .iter()
        .flat_map(|&t| (0..TIME_EMBED).map(move |j| sinusoid(t, j, TIME_EMBED)))
        .collect();
    Tensor::new(&[t.len(), TIME_EMBED], data).expect("sized")
}

/// Architecture of a learned score network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Fc,
    Cnn,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 2] = [ScoreKind::Fc, ScoreKind::Cnn];

    pub fn tag(self) -> &'static str {
        match self {
            ScoreKind::Fc => "FC",
            ScoreKind::Cnn => "CNN",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fc" => Ok(ScoreKind::Fc),
            "cnn" => Ok(ScoreKind::Cnn),
            _ => Err(Error::invalid("score", format!("unknown score model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    /// Hidden width (FC) or channel count (CNN).
    pub width: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            kind: ScoreKind::Fc,
            width: 128,
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Fc(Mlp),
    Cnn { convs: Vec<Conv1d>, pos: ParamId },
}

const CNN_POS: usize = 4;

/// Learned score network in noise-prediction form:
/// `s(z, t) = −net(z, t) / √(1 − ᾱ(t))`.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub kind: ScoreKind,
    k: usize,
    net: Net,
    schedule: NoiseSchedule,
}

impl ScoreNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ScoreConfig,
        k: usize,
        schedule: NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 || cfg.width == 0 {
            return Err(Error::invalid("score", "latent dim and width must be positive"));
        }
        let w = cfg.width;
        let net = match cfg.kind {
            ScoreKind::Fc => Net::Fc(Mlp::new(store, &format!("{name}.mlp"), &[k + TIME_EMBED, w, w, k], rng)?),
            ScoreKind::Cnn => Net::Cnn {
                convs: vec![
                    Conv1d::new(store, &format!("{name}.conv0"), 1 + TIME_EMBED + CNN_POS, w, 3, rng)?,
                    Conv1d::new(store, &format!("{name}.conv1"), w, w, 3, rng)?,
                    Conv1d::new(store, &format!("{name}.conv2"), w, 1, 3, rng)?,
                ],
                pos: store.insert(format!("{name}.pos"), rng.normal_tensor(&[k, CNN_POS]).scale(0.1))?,
            },
        };
        Ok(ScoreNet {
            kind: cfg.kind,
            k,
            net,
            schedule,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// The raw noise prediction `net(z, t)`.
    pub fn predict_noise(&self, g: &Graph, z: Var, t: &[f64]) -> Result<Var> {
        let b = check_rows("score", g, z, t, self.k)?;
        let emb = time_embedding(t);
        match &self.net {
            Net::Fc(mlp) => {
                let h = g.concat(&[z, g.input(emb)], 1)?;
                mlp.forward(g, h)
            }
            Net::Cnn { convs, pos } => {
                let k = self.k;
                let zc = g.reshape(z, &[b, k, 1])?;
                let tiled: Vec<f64> = emb
                    .data()
                    .chunks(TIME_EMBED)
                    .flat_map(|row| std::iter::repeat_n(row, k).flatten().copied())
                    .collect();
                let e = g.input(Tensor::new(&[b, k, TIME_EMBED], tiled)?);
                let p = g.add(g.input(Tensor::zeros(&[b, k, CNN_POS])), g.param(*pos))?;
                let mut h = g.concat(&[zc, e, p], 2)?;
                for (j, c) in convs.iter().enumerate() {
                    h = c.forward(g, h)?;
                    if j + 1 < convs.len() {
                        h = g.silu(h)?;
                    }
                }
                g.reshape(h, &[b, k])
            }
        }
    }
}

impl ScoreFunction for ScoreNet {
    fn latent_dim(&self) -> usize {
        self.k
    }

    fn score(&self, g: &Graph, z: Var, t: &[f64]) -> Result<Var> {
        let eps = self.predict_noise(g, z, t)?;
        let scale: Vec<f64> = t
            .iter()
            .map(|&t| -1.0 / (1.0 - self.schedule.alpha_bar_at(t)).max(1e-12).sqrt())
            .collect();
        g.mul(eps, g.input(Tensor::new(&[t.len(), 1], scale)?))
    }
}

/// Diagonal Gaussian with positive variances.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::invalid("gaussian_prior", "mean and variance lengths differ"));
        }
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("gaussian_prior", "variances must be positive"));
        }
        Ok(GaussianPrior { mean, var })
    }

    pub fn standard(k: usize) -> Self {
        GaussianPrior {
            mean: vec![0.0; k],
            var: vec![1.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut Rng, count: usize) -> Tensor {
        let eps = rng.normal_tensor(&[count, self.dim()]);
        let k = self.dim();
        let data = eps
            .data()
            .iter()
            .enumerate()
            .map(|(c, e)| self.mean[c % k] + self.var[c % k].sqrt() * e)
            .collect();
        Tensor::new(&[count, k], data).expect("sized")
    }
}

/// Exact score of the diffused Gaussian: at time `t` the marginal is
/// `N(√ᾱ(t) m, ᾱ(t) v + 1 − ᾱ(t))`.
#[derive(Clone, Debug)]
pub struct GaussianScore {
    pub prior: GaussianPrior,
    pub schedule: NoiseSchedule,
}

impl GaussianScore {
    pub fn new(prior: GaussianPrior, schedule: NoiseSchedule) -> Self {
        GaussianScore { prior, schedule }
    }

    /// Marginal mean and variance per dimension at time `t`.
    pub fn marginal(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let ab = self.schedule.alpha_bar_at(t);
        let mean = self.prior.mean.iter().map(|m| ab.sqrt() * m).collect();
        let var = self.prior.var.iter().map(|v| ab * v + 1.0 - ab).collect();
        (mean, var)
    }

    pub fn score_tensor(&self, z: &Tensor, t: &[f64]) -> Tensor {
        let k = self.prior.dim();
        let mut out = Vec::with_capacity(z.len());
        for (row, &t) in z.data().chunks(k).zip(t) {
            let (m, v) = self.marginal(t);
            out.extend(row.iter().enumerate().map(|(j, z)| -(z - m[j]) / v[j]));
        }
        Tensor::new(z.shape(), out).expect("same shape as z")
    }
}

impl ScoreFunction for GaussianScore {
    fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    fn score(&self, g: &Graph, z: Var, t: &[f64]) -> Result<Var> {
        let b = check_rows("gaussian_score", g, z, t, self.prior.dim())?;
        let k = self.prior.dim();
        let mut shift = Vec::with_capacity(b * k);
        let mut inv = Vec::with_capacity(b * k);
        for &t in t {
            let (m, v) = self.marginal(t);
            shift.extend(m);
            inv.extend(v.iter().map(|v| -1.0 / v));
        }
        let d = g.sub(z, g.input(Tensor::new(&[b, k], shift)?))?;
        g.mul(d, g.input(Tensor::new(&[b, k], inv)?))
    }
}

/// The conditional score `∇ log q(z_t | z_0)` for known clean rows `z0`.
/// A perfect model for the denoising loss on exactly those rows.
#[derive(Clone, Debug)]
pub struct ConditionalScore {
    pub z0: Tensor,
    pub schedule: NoiseSchedule,
}

impl ScoreFunction for ConditionalScore {
    fn latent_dim(&self) -> usize {
        self.z0.shape()[1]
    }

    fn score(&self, g: &Graph, z: Var, t: &[f64]) -> Result<Var> {
        let k = self.latent_dim();
        let b = check_rows("conditional_score", g, z, t, k)?;
        if b != self.z0.shape()[0] {
            return Err(Error::shape("conditional_score", &[b, k], self.z0.shape()));
        }
        let mut shift = Vec::with_capacity(b * k);
        let mut inv = Vec::with_capacity(b * k);
        for (row, &t) in self.z0.data().chunks(k).zip(t) {
            let ab = self.schedule.alpha_bar_at(t);
            shift.extend(row.iter().map(|z0| ab.sqrt() * z0));
            inv.extend(std::iter::repeat_n(-1.0 / (1.0 - ab), k));
        }
        let d = g.sub(z, g.input(Tensor::new(&[b, k], shift)?))?;
        g.mul(d, g.input(Tensor::new(&[b, k], inv)?))
    }
}

/// `s ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroScore(pub usize);

impl ScoreFunction for ZeroScore {
    fn latent_dim(&self) -> usize {
        self.0
    }

    fn score(&self, g: &Graph, z: Var, t: &[f64]) -> Result<Var> {
        check_rows("zero_score", g, z, t, self.0)?;
        g.mul_scalar(z, 0.0)
    }
}
