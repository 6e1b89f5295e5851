//! Parameterized layers built from graph operations.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

fn uniform_init(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// `y = x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            uniform_init(rng, &[fan_in, fan_out], bound),
        )?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, g.param(b)),
            None => Ok(y),
        }
    }
}

/// Stack of [`Linear`] layers with SiLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// Same-padded 1-D convolution, channels last, with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = (6.0 / ((c_in + c_out) * kernel) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            uniform_init(rng, &[kernel, c_in, c_out], bound),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv1d { weight, bias })
    }

    /// `x: [B, L, C_in]` → `[B, L, C_out]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.conv1d(x, g.param(self.weight))?;
        g.add(y, g.param(self.bias))
    }
}
