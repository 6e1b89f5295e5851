//! Latent-to-horizon decoders mirroring the encoder families.

use crate::attention::{block_vars, AttentionParams, EncoderConfig, EncoderKind, LtEmbedding};
use crate::error::{Error, Result};
use crate::numeric::{Conv1d, Graph, Linear, Mlp, ParamStore, Rng, Var};

#[derive(Clone, Debug)]
enum Body {
    Fc(Mlp),
    Cnn {
        lift: Linear,
        convs: Vec<Conv1d>,
    },
    Lt {
        lift: Linear,
        embed: LtEmbedding,
        blocks: Vec<AttentionParams>,
        out: Linear,
    },
}

/// Maps `z: [B, k]` to the forecast mean `[B, T_y, n]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub kind: EncoderKind,
    pub n: usize,
    pub horizon: usize,
    pub latent_dim: usize,
    width: usize,
    body: Body,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        n: usize,
        horizon: usize,
        latent_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let cells = horizon * n;
        let body = match cfg.kind {
            EncoderKind::Fc => Body::Fc(Mlp::new(store, &format!("{name}.mlp"), &[latent_dim, w, w, cells], rng)?),
            EncoderKind::Cnn => Body::Cnn {
                lift: Linear::new(store, &format!("{name}.lift"), latent_dim, horizon * w, true, rng)?,
                convs: vec![
                    Conv1d::new(store, &format!("{name}.conv0"), w, w, cfg.kernel, rng)?,
                    Conv1d::new(store, &format!("{name}.conv1"), w, n, cfg.kernel, rng)?,
                ],
            },
            EncoderKind::Lt => Body::Lt {
                lift: Linear::new(store, &format!("{name}.lift"), latent_dim, cells * w, true, rng)?,
                embed: LtEmbedding::new(store, &format!("{name}.embed"), n, horizon, w, false, rng)?,
                blocks: (0..cfg.blocks)
                    .map(|b| {
                        AttentionParams::new(store, &format!("{name}.block{b}"), w, cfg.heads, n, cfg.scale_mode, rng)
                    })
                    .collect::<Result<_>>()?,
                out: Linear::new(store, &format!("{name}.out"), w, 1, true, rng)?,
            },
        };
        Ok(Decoder {
            kind: cfg.kind,
            n,
            horizon,
            latent_dim,
            width: w,
            body,
        })
    }

    pub fn forward(&self, g: &Graph, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::shape("decode", &shape, &[0, self.latent_dim]));
        }
        let b = shape[0];
        let (ty, n, w) = (self.horizon, self.n, self.width);
        match &self.body {
            Body::Fc(mlp) => g.reshape(mlp.forward(g, z)?, &[b, ty, n]),
            Body::Cnn { lift, convs } => {
                let h = g.silu(g.reshape(lift.forward(g, z)?, &[b, ty, w])?)?;
                let h = g.silu(convs[0].forward(g, h)?)?;
                convs[1].forward(g, h)
            }
            Body::Lt {
                lift,
                embed,
                blocks,
                out,
            } => {
                let tokens = g.reshape(lift.forward(g, z)?, &[b, ty * n, w])?;
                let mut h = g.add(tokens, embed.positions(g)?)?;
                for p in blocks {
                    let (a, _, _) = block_vars(g, h, p, &embed.masks)?;
                    h = g.layer_norm(g.add(h, a)?, 1e-5)?;
                }
                g.reshape(out.forward(g, h)?, &[b, ty, n])
            }
        }
    }
}
