//! Window encoders producing the diagonal-Gaussian posterior q(z | x).

use serde::{Deserialize, Serialize};

use super::block::{block_vars, local_temporal_block, AttentionParams, EdgeTensors, ScaleMode};
use super::mask::{build_masks, MaskPair};
use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::numeric::{Conv1d, Graph, Linear, Mlp, ParamId, ParamStore, Rng, Tensor, Var};

/// Added to the softplus of every standard-deviation head.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Fc,
    Cnn,
    Lt,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Fc, EncoderKind::Cnn, EncoderKind::Lt];

    pub fn tag(self) -> &'static str {
        match self {
            EncoderKind::Fc => "FC",
            EncoderKind::Cnn => "CNN",
            EncoderKind::Lt => "LT",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fc" => Ok(EncoderKind::Fc),
            "cnn" => Ok(EncoderKind::Cnn),
            "lt" => Ok(EncoderKind::Lt),
            _ => Err(Error::invalid("encoder", format!("unknown encoder `{s}`"))),
        }
    }
}

/// Shape knobs shared by encoder and decoder. `width` is the model width `d`
/// for LT, the hidden width for FC and the channel count for CNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub scale_mode: ScaleMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Lt,
            width: 64,
            heads: 4,
            blocks: 2,
            kernel: 3,
            scale_mode: ScaleMode::SqrtHeadWidth,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("encoder", "width must be positive"));
        }
        if self.kind == EncoderKind::Lt {
            if self.heads == 0 || self.width % self.heads != 0 {
                return Err(Error::invalid(
                    "encoder",
                    format!("heads ({}) must divide width ({})", self.heads, self.width),
                ));
            }
            if self.blocks == 0 {
                return Err(Error::invalid("encoder", "LT needs at least one block"));
            }
        }
        if self.kind == EncoderKind::Cnn && self.kernel % 2 == 0 {
            return Err(Error::invalid("encoder", "CNN kernel must be odd"));
        }
        Ok(())
    }
}

/// Token embedding for local-temporal layers over a `[B, T, n]` grid.
#[derive(Clone, Debug)]
pub(crate) struct LtEmbedding {
    pub value: Option<Linear>,
    pub var_embed: ParamId,
    /// `[nT, n]` one-hot variable ids in time-major order.
    pub onehot: Tensor,
    /// `[nT, d]` sinusoidal encoding of the time index.
    pub time_pos: Tensor,
    pub masks: MaskPair,
}

pub(crate) fn sinusoid(pos: f64, j: usize, d: usize) -> f64 {
    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
    if j % 2 == 0 {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

impl LtEmbedding {
    /// `with_value` adds the scalar-to-token projection used on observed
    /// inputs; without it only positional terms are built.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        t: usize,
        d: usize,
        with_value: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let masks = build_masks(n, t)?;
        let len = n * t;
        let value = if with_value {
            Some(Linear::new(store, &format!("{name}.value"), 1, d, true, rng)?)
        } else {
            None
        };
        let var_embed = store.insert(
            format!("{name}.var"),
            rng.normal_tensor(&[n, d]).scale(0.1),
        )?;
        let mut onehot = vec![0.0; len * n];
        let mut time_pos = Vec::with_capacity(len * d);
        for a in 0..len {
            onehot[a * n + a % n] = 1.0;
            time_pos.extend((0..d).map(|j| sinusoid((a / n) as f64, j, d)));
        }
        Ok(LtEmbedding {
            value,
            var_embed,
            onehot: Tensor::new(&[len, n], onehot)?,
            time_pos: Tensor::new(&[len, d], time_pos)?,
            masks,
        })
    }

    /// Variable plus time encoding, `[nT, d]`.
    pub fn positions(&self, g: &Graph) -> Result<Var> {
        let var = g.matmul(g.input(self.onehot.clone()), g.param(self.var_embed))?;
        g.add(var, g.input(self.time_pos.clone()))
    }

    /// `x: [B, T, n]` → tokens `[B, nT, d]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let len = self.masks.size();
        let value = self
            .value
            .as_ref()
            .ok_or_else(|| Error::invalid("lt_embedding", "built without a value projection"))?;
        let tokens = g.reshape(x, &[shape[0], len, 1])?;
        let h = value.forward(g, tokens)?;
        g.add(h, self.positions(g)?)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Fc(Mlp),
    Cnn(Vec<Conv1d>),
    Lt {
        embed: LtEmbedding,
        blocks: Vec<AttentionParams>,
    },
}

/// Maps `[B, T_x, n]` windows to posterior mean and standard deviation `[B, k]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub n: usize,
    pub lookback: usize,
    pub latent_dim: usize,
    body: Body,
    mu_head: Linear,
    sigma_head: Linear,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        n: usize,
        lookback: usize,
        latent_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n == 0 || lookback == 0 || latent_dim == 0 {
            return Err(Error::invalid("encoder", "n, T_x and k must be positive"));
        }
        let w = cfg.width;
        let body = match cfg.kind {
            EncoderKind::Fc => Body::Fc(Mlp::new(store, &format!("{name}.mlp"), &[lookback * n, w, w], rng)?),
            EncoderKind::Cnn => Body::Cnn(vec![
                Conv1d::new(store, &format!("{name}.conv0"), n, w, cfg.kernel, rng)?,
                Conv1d::new(store, &format!("{name}.conv1"), w, w, cfg.kernel, rng)?,
            ]),
            EncoderKind::Lt => Body::Lt {
                embed: LtEmbedding::new(store, &format!("{name}.embed"), n, lookback, w, true, rng)?,
                blocks: (0..cfg.blocks)
                    .map(|b| {
                        AttentionParams::new(store, &format!("{name}.block{b}"), w, cfg.heads, n, cfg.scale_mode, rng)
                    })
                    .collect::<Result<_>>()?,
            },
        };
        Ok(Encoder {
            kind: cfg.kind,
            n,
            lookback,
            latent_dim,
            body,
            mu_head: Linear::new(store, &format!("{name}.mu"), w, latent_dim, true, rng)?,
            sigma_head: Linear::new(store, &format!("{name}.sigma"), w, latent_dim, true, rng)?,
        })
    }

    fn check(&self, g: &Graph, x: Var) -> Result<usize> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.lookback || shape[2] != self.n {
            return Err(Error::shape("encode", &shape, &[0, self.lookback, self.n]));
        }
        Ok(shape[0])
    }

    fn features(&self, g: &Graph, x: Var, mut edges: Option<&mut Vec<EdgeTensors>>) -> Result<Var> {
        let b = self.check(g, x)?;
        match &self.body {
            Body::Fc(mlp) => {
                let flat = g.reshape(x, &[b, self.lookback * self.n])?;
                g.silu(mlp.forward(g, flat)?)
            }
            Body::Cnn(convs) => {
                let mut h = x;
                for c in convs {
                    h = g.silu(c.forward(g, h)?)?;
                }
                g.mean_axis(h, 1)
            }
            Body::Lt { embed, blocks } => {
                let mut h = embed.forward(g, x)?;
                for p in blocks {
                    let a = match edges.as_deref_mut() {
                        Some(out) => {
                            let (a, e) = local_temporal_block(g, h, p, &embed.masks)?;
                            out.push(e);
                            a
                        }
                        None => block_vars(g, h, p, &embed.masks)?.0,
                    };
                    h = g.layer_norm(g.add(h, a)?, 1e-5)?;
                }
                g.mean_axis(h, 1)
            }
        }
    }

    fn heads(&self, g: &Graph, f: Var) -> Result<(Var, Var)> {
        let mu = self.mu_head.forward(g, f)?;
        let sigma = g.add_scalar(g.softplus(self.sigma_head.forward(g, f)?)?, SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    /// `x: [B, T_x, n]` → `(mu, sigma)`, each `[B, k]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<(Var, Var)> {
        let f = self.features(g, x, None)?;
        self.heads(g, f)
    }

    /// Forward pass that also returns every LT block's attention weights
    /// (empty for FC and CNN).
    pub fn forward_with_edges(&self, g: &Graph, x: Var) -> Result<(Var, Var, Vec<EdgeTensors>)> {
        let mut edges = Vec::new();
        let f = self.features(g, x, Some(&mut edges))?;
        let (mu, sigma) = self.heads(g, f)?;
        Ok((mu, sigma, edges))
    }

    /// Posterior of a single window.
    pub fn encode(&self, store: &ParamStore, window: &SeriesWindow) -> Result<PosteriorParams> {
        let g = Graph::inference(store);
        let shape = window.x.shape();
        let x = g.input(window.x.reshape(&[1, shape[0], shape[1]])?);
        let (mu, sigma) = self.forward(&g, x)?;
        Ok(PosteriorParams {
            mu: g.value(mu).reshape(&[self.latent_dim])?,
            sigma: g.value(sigma).reshape(&[self.latent_dim])?,
        })
    }
}

/// Mean and standard deviation of q(z | x).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}
