//! Dual-masked multi-head attention and the local-temporal block.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::mask::MaskPair;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Linear, ParamStore, Rng, Tensor, Var};

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// `sqrt(d / heads)`.
    #[default]
    #[serde(rename = "sqrt-d")]
    SqrtHeadWidth,
    /// The variable count `n`.
    #[serde(rename = "var-count")]
    VarCount,
}

/// Query/key/value projections of one head, no bias.
#[derive(Clone, Debug)]
pub struct HeadProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// All heads of one masked branch.
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub heads: Vec<HeadProj>,
    pub head_width: usize,
}

impl AttentionBranch {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("head count {heads} must divide width {d}"),
            ));
        }
        let dh = d / heads;
        let heads = (0..heads)
            .map(|h| {
                Ok(HeadProj {
                    q: Linear::new(store, &format!("{name}.h{h}.q"), d, dh, false, rng)?,
                    k: Linear::new(store, &format!("{name}.h{h}.k"), d, dh, false, rng)?,
                    v: Linear::new(store, &format!("{name}.h{h}.v"), d, dh, false, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttentionBranch { heads, head_width: dh })
    }

    pub fn width(&self) -> usize {
        self.heads.len() * self.head_width
    }
}

/// Both branches of one block. `complement` is absent for univariate input.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub gamma: AttentionBranch,
    pub complement: Option<AttentionBranch>,
    pub scale_mode: ScaleMode,
    pub n: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        n: usize,
        scale_mode: ScaleMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        let gamma = AttentionBranch::new(store, &format!("{name}.gamma"), d, heads, rng)?;
        let complement = if n > 1 {
            Some(AttentionBranch::new(store, &format!("{name}.complement"), d, heads, rng)?)
        } else {
            None
        };
        Ok(AttentionParams {
            gamma,
            complement,
            scale_mode,
            n,
        })
    }

    pub fn scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::SqrtHeadWidth => (self.gamma.head_width as f64).sqrt(),
            ScaleMode::VarCount => self.n as f64,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.width()
    }
}

/// Attention over `x: [.., L, d]` where `allowed` (`L × L`, row-major) marks
/// the positions each query may attend to.
///
/// Returns the head outputs concatenated to `[.., L, d]` and each head's
/// weights `[.., L, L]`.
pub fn masked_attention(
    g: &Graph,
    x: Var,
    allowed: &[bool],
    branch: &AttentionBranch,
    scale: f64,
) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(x);
    let len = *shape
        .get(shape.len().wrapping_sub(2))
        .ok_or_else(|| Error::shape("masked_attention", &shape, &[0, 0]))?;
    if allowed.len() != len * len {
        return Err(Error::shape("masked_attention", &shape, &[allowed.len()]));
    }
    if let Some(r) = allowed.chunks(len.max(1)).position(|row| !row.contains(&true)) {
        return Err(Error::invalid(
            "masked_attention",
            format!("row {r} of the mask admits no position"),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid("masked_attention", "scale must be positive"));
    }
    let blocked: Vec<bool> = allowed.iter().map(|&a| !a).collect();
    let any_blocked = blocked.contains(&true);
    let mut outs = Vec::with_capacity(branch.heads.len());
    let mut weights = Vec::with_capacity(branch.heads.len());
    for head in &branch.heads {
        let q = head.q.forward(g, x)?;
        let k = head.k.forward(g, x)?;
        let v = head.v.forward(g, x)?;
        let mask_shape = [len, len];
        let mask = any_blocked.then_some((blocked.as_slice(), mask_shape.as_slice()));
        let w = g.masked_softmax(g.matmul_nt(q, k)?, 1.0 / scale, mask)?;
        outs.push(g.matmul(w, v)?);
        weights.push(w);
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, shape.len() - 1)?
    };
    Ok((out, weights))
}

/// Per-head attention weights of both branches.
#[derive(Clone, Debug)]
pub struct EdgeTensors {
    /// Gamma-branch weights per head, `[.., L, L]`.
    pub e_l: Vec<Tensor>,
    /// Complement-branch weights per head; empty when `n = 1`.
    pub e_t: Vec<Tensor>,
}

/// Which branch of [`EdgeTensors`] to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Gamma,
    Complement,
}

impl EdgeTensors {
    /// Writes `head,from,to,weight` rows for window `window` of a batched
    /// forward pass, skipping positions outside the branch's support.
    pub fn write_csv(&self, out: &mut impl Write, branch: Branch, window: usize) -> Result<()> {
        let heads = match branch {
            Branch::Gamma => &self.e_l,
            Branch::Complement => &self.e_t,
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["head", "from", "to", "weight"])
            .map_err(csv_io)?;
        for (h, t) in heads.iter().enumerate() {
            let len = *t.shape().last().unwrap_or(&0);
            let per = len * len;
            let Some(block) = t.data().get(window * per..(window + 1) * per) else {
                return Err(Error::invalid("edge_csv", format!("no window {window}")));
            };
            for (idx, &v) in block.iter().enumerate() {
                if v > 0.0 {
                    w.write_record(&[
                        h.to_string(),
                        (idx / len).to_string(),
                        (idx % len).to_string(),
                        format!("{v}"),
                    ])
                    .map_err(csv_io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid("csv", format!("{other:?}")),
    }
}

/// `A = Att(gamma branch) + Att(complement branch)` over `x: [.., nT, d]`.
pub fn local_temporal_block(
    g: &Graph,
    x: Var,
    params: &AttentionParams,
    masks: &MaskPair,
) -> Result<(Var, EdgeTensors)> {
    let (a, w_gamma, w_comp) = block_vars(g, x, params, masks)?;
    let e_l = w_gamma.iter().map(|&w| g.value(w)).collect();
    let e_t = w_comp.iter().map(|&w| g.value(w)).collect();
    Ok((a, EdgeTensors { e_l, e_t }))
}

/// Same as [`local_temporal_block`] but leaves the weights on the graph.
pub(crate) fn block_vars(
    g: &Graph,
    x: Var,
    params: &AttentionParams,
    masks: &MaskPair,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let scale = params.scale();
    let (a_gamma, w_gamma) = masked_attention(g, x, &masks.gamma, &params.gamma, scale)?;
    match (&params.complement, masks.has_complement()) {
        (Some(branch), true) => {
            let (a_comp, w_comp) = masked_attention(g, x, &masks.complement, branch, scale)?;
            Ok((g.add(a_gamma, a_comp)?, w_gamma, w_comp))
        }
        (None, false) => Ok((a_gamma, w_gamma, Vec::new())),
        _ => Err(Error::invalid(
            "local_temporal_block",
            "complement branch presence does not match the mask layout",
        )),
    }
}
