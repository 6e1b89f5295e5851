//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar replays the tape in reverse and returns the
//! gradient of that scalar with respect to every variable that requires one.
//! Inference graphs ([`Graph::inference`]) keep values only.
//!
//! Operations take `&self`, so nested expressions such as
//! `g.add(g.matmul(x, w)?, b)?` compose without borrow juggling.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{
    broadcast_offsets, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, is_suffix, numel, reduce_to,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Tanh(Var),
    Silu(Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Softmax(Var),
    ScaledSoftmax(Var, f64),
    MaskedFill(Var, Rc<[bool]>),
    Conv1d(Var, Var),
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    LayerNorm(Var, Rc<[f64]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. See the module docs.
pub struct Graph<'p> {
    nodes: RefCell<Vec<Node>>,
    params: Option<&'p ParamStore>,
    param_vars: RefCell<Vec<Option<Var>>>,
    record: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Recording graph with no parameter store.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: None,
            param_vars: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// Recording graph whose [`Graph::param`] reads from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            param_vars: RefCell::new(vec![None; params.len()]),
            ..Self::new()
        }
    }

    /// Value-only graph: nothing requires gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            record: false,
            ..Self::with_params(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input (never receives a gradient).
    pub fn input(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that receives a gradient on a recording graph.
    pub fn var(&self, value: Tensor) -> Var {
        self.push_leaf(value, self.record)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&self, id: ParamId) -> Var {
        let store = self
            .params
            .expect("Graph::param called on a graph without a parameter store");
        if let Some(v) = self.param_vars.borrow()[id.index()] {
            return v;
        }
        let v = self.push_leaf(store.get(id).clone(), self.record);
        self.param_vars.borrow_mut()[id.index()] = Some(v);
        v
    }

    /// Copy of `v`'s value as a constant, cutting the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.input(t)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Borrowed view of a value; drop it before recording new operations.
    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, parents))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.record && parents.iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(Var) -> Op,
    ) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.map(f);
        self.push(name, out, op(a), &[a])
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
            let (da, db) = (ta.data(), tb.data());
            let data: Vec<f64> = if ta.shape() == tb.shape() {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else if ta.shape() == shape.as_slice() && is_suffix(tb.shape(), &shape) {
                let w = db.len();
                da.chunks(w)
                    .flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y)))
                    .collect()
            } else {
                let oa = broadcast_offsets(&shape, ta.shape());
                let ob = broadcast_offsets(&shape, tb.shape());
                oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
            };
            Tensor::from_parts(shape, data)
        };
        self.push(name, out, op(a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise division; any zero in the divisor is rejected.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.nodes.borrow()[b.0].value.data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("mul_scalar", a, |x| x * c, |a| Op::MulScalar(a, c))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    /// Natural logarithm; non-positive operands are rejected.
    pub fn log(&self, a: Var) -> Result<Var> {
        if self.nodes.borrow()[a.0].value.data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::domain("log", "operand must be strictly positive"));
        }
        self.unary("log", a, f64::ln, Op::Log)
    }

    /// Square root; negative operands are rejected.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if self.nodes.borrow()[a.0].value.data().iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::domain("sqrt", "operand must be non-negative"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., m, k]`; `b` is either a shared `[k, n]` matrix or has the same
    /// leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let dims = matmul_dims(ta.shape(), tb.shape(), false)
                .ok_or_else(|| Error::shape("matmul", ta.shape(), tb.shape()))?;
            let mut out = vec![0.0; dims.batch * dims.m * dims.n];
            if dims.shared_b {
                gemm_nn(dims.batch * dims.m, dims.k, dims.n, ta.data(), tb.data(), &mut out);
            } else {
                for i in 0..dims.batch {
                    gemm_nn(
                        dims.m,
                        dims.k,
                        dims.n,
                        &ta.data()[i * dims.m * dims.k..][..dims.m * dims.k],
                        &tb.data()[i * dims.k * dims.n..][..dims.k * dims.n],
                        &mut out[i * dims.m * dims.n..][..dims.m * dims.n],
                    );
                }
            }
            let mut shape = ta.shape().to_vec();
            *shape.last_mut().unwrap() = dims.n;
            Tensor::from_parts(shape, out)
        };
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// `a · bᵀ` over the last two axes with matching leading axes:
    /// `a: [.., m, k]`, `b: [.., n, k]` → `[.., m, n]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let dims = matmul_dims(ta.shape(), tb.shape(), true)
                .ok_or_else(|| Error::shape("matmul_nt", ta.shape(), tb.shape()))?;
            let mut out = vec![0.0; dims.batch * dims.m * dims.n];
            for i in 0..dims.batch {
                gemm_nt(
                    dims.m,
                    dims.k,
                    dims.n,
                    &ta.data()[i * dims.m * dims.k..][..dims.m * dims.k],
                    &tb.data()[i * dims.n * dims.k..][..dims.n * dims.k],
                    &mut out[i * dims.m * dims.n..][..dims.m * dims.n],
                );
            }
            let mut shape = ta.shape().to_vec();
            *shape.last_mut().unwrap() = dims.n;
            Tensor::from_parts(shape, out)
        };
        self.push("matmul_nt", out, Op::MatmulNt(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let t = &self.nodes.borrow()[a.0].value;
            if t.rank() < 2 {
                return Err(Error::shape("transpose", t.shape(), &[]));
            }
            transpose_last2(t)
        };
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Softmax over the last axis. `-inf` logits get weight exactly 0; a row
    /// with no finite logit is rejected.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let out = {
            let t = &self.nodes.borrow()[a.0].value;
            let w = *t.shape().last().ok_or_else(|| Error::shape("softmax", &[], &[]))?;
            let mut data = Vec::with_capacity(t.len());
            for (r, row) in t.data().chunks(w.max(1)).enumerate() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::domain(
                        "softmax",
                        format!("row {r} has no finite logit (fully masked or NaN)"),
                    ));
                }
                let start = data.len();
                let mut z = 0.0;
                for &x in row {
                    let e = (x - max).exp();
                    z += e;
                    data.push(e);
                }
                for v in &mut data[start..] {
                    *v /= z;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// `softmax(c · a)` over the last axis with `mask`-true positions
    /// excluded (weight exactly 0). `mask` repeats over every row block of
    /// `mask.len()` elements, as in [`masked_fill`](Self::masked_fill).
    pub fn masked_softmax(&self, a: Var, c: f64, mask: Option<(&[bool], &[usize])>) -> Result<Var> {
        let out = {
            let t = &self.nodes.borrow()[a.0].value;
            let w = *t.shape().last().ok_or_else(|| Error::shape("masked_softmax", &[], &[]))?;
            if let Some((m, shape)) = mask {
                if numel(shape) != m.len() || !is_suffix(shape, t.shape()) || shape.last() != Some(&w) {
                    return Err(Error::shape("masked_softmax", t.shape(), shape));
                }
            }
            let period = mask.map_or(w.max(1), |(m, _)| m.len().max(1));
            let mut data = vec![0.0; t.len()];
            for (r, (row, dst)) in t.data().chunks(w.max(1)).zip(data.chunks_mut(w.max(1))).enumerate() {
                let off = (r * w) % period;
                let blocked = |j: usize| mask.is_some_and(|(m, _)| m[off + j]);
                let mut max = f64::NEG_INFINITY;
                for (j, &x) in row.iter().enumerate() {
                    if !blocked(j) {
                        max = max.max(c * x);
                    }
                }
                if !max.is_finite() {
                    return Err(Error::domain(
                        "masked_softmax",
                        format!("row {r} has no finite logit (fully masked or NaN)"),
                    ));
                }
                let mut z = 0.0;
                for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                    if !blocked(j) {
                        *d = (c * x - max).exp();
                        z += *d;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= z;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        self.push("masked_softmax", out, Op::ScaledSoftmax(a, c), &[a])
    }

    /// Sets positions where `mask` is true to `-inf`.
    ///
    /// `mask_shape` must be a trailing-axes suffix of `a`'s shape; the mask is
    /// repeated over the leading axes.
    pub fn masked_fill(&self, a: Var, mask: &[bool], mask_shape: &[usize]) -> Result<Var> {
        let mask: Rc<[bool]> = Rc::from(mask);
        let out = {
            let t = &self.nodes.borrow()[a.0].value;
            if numel(mask_shape) != mask.len() || !is_suffix(mask_shape, t.shape()) {
                return Err(Error::shape("masked_fill", t.shape(), mask_shape));
            }
            let mut data = t.data().to_vec();
            for chunk in data.chunks_mut(mask.len().max(1)) {
                for (v, &m) in chunk.iter_mut().zip(mask.iter()) {
                    if m {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        Ok(self.push_unchecked(out, Op::MaskedFill(a, mask), &[a]))
    }

    /// Same-padded 1-D convolution, channels last.
    ///
    /// `x: [B, L, C_in]`, `w: [K, C_in, C_out]` with odd `K` → `[B, L, C_out]`.
    pub fn conv1d(&self, x: Var, w: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let d = conv_dims(tx.shape(), tw.shape())
                .ok_or_else(|| Error::shape("conv1d", tx.shape(), tw.shape()))?;
            let mut out = vec![0.0; d.batch * d.len * d.c_out];
            for b in 0..d.batch {
                for j in 0..d.k {
                    let Some((dst, src, n)) = d.window(j) else {
                        continue;
                    };
                    gemm_nn(
                        n,
                        d.c_in,
                        d.c_out,
                        &tx.data()[(b * d.len + src) * d.c_in..][..n * d.c_in],
                        &tw.data()[j * d.c_in * d.c_out..][..d.c_in * d.c_out],
                        &mut out[(b * d.len + dst) * d.c_out..][..n * d.c_out],
                    );
                }
            }
            Tensor::from_parts(vec![d.batch, d.len, d.c_out], out)
        };
        self.push("conv1d", out, Op::Conv1d(x, w), &[x, w])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| Error::invalid("concat", "no parts"))?.0]
                .value;
            if axis >= first.rank() {
                return Err(Error::invalid("concat", format!("axis {axis} out of range")));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                let compatible = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
                shape[axis] += t.shape()[axis];
            }
            let outer: usize = shape[..axis].iter().product();
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let w = t.len() / outer.max(1);
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let m = self.nodes.borrow()[a.0].value.mean();
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis_value(a, axis, false)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis_value(a, axis, true)?;
        self.push("mean_axis", out, Op::MeanAxis(a, axis), &[a])
    }

    fn reduce_axis_value(&self, a: Var, axis: usize, mean: bool) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        if axis >= t.rank() {
            return Err(Error::invalid("reduce_axis", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..][..inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let c = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= c);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (out, inv) = {
            let t = &self.nodes.borrow()[a.0].value;
            let w = *t.shape().last().ok_or_else(|| Error::shape("layer_norm", &[], &[]))?;
            let mut data = Vec::with_capacity(t.len());
            let mut inv = Vec::with_capacity(t.len() / w.max(1));
            for row in t.data().chunks(w.max(1)) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv.push(s);
                data.extend(row.iter().map(|x| (x - mean) * s));
            }
            (Tensor::from_parts(t.shape().to_vec(), data), inv)
        };
        self.push("layer_norm", out, Op::LayerNorm(a, Rc::from(inv)), &[a])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = self.param_vars.borrow().clone();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient for `v`, if it lies on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter read through [`Graph::param`].
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// Per-parameter gradients in store order; unused parameters are `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|v| v.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Option<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return None;
    }
    let batch = numel(&a[..a.len() - 2]);
    let shared_b = b.len() == 2 && !transpose_b;
    if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
        return None;
    }
    Some(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_b,
    })
}

struct ConvDims {
    batch: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl ConvDims {
    /// For tap `j`: (first output row, first input row, row count).
    fn window(&self, j: usize) -> Option<(usize, usize, usize)> {
        let pad = self.k / 2;
        let (dst, src) = if j < pad { (pad - j, 0) } else { (0, j - pad) };
        let n = self.len.checked_sub(dst.max(src))?;
        (n > 0).then_some((dst, src, n))
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> Option<ConvDims> {
    if x.len() != 3 || w.len() != 3 || x[2] != w[1] || w[0] % 2 == 0 {
        return None;
    }
    Some(ConvDims {
        batch: x[0],
        len: x[1],
        c_in: x[2],
        c_out: w[2],
        k: w[0],
    })
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.len() / (m * n).max(1);
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..][..m * n];
        let dst = &mut out[b * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

fn expand(t: &Tensor, shape: &[usize]) -> Vec<f64> {
    if t.shape() == shape {
        return t.data().to_vec();
    }
    broadcast_offsets(shape, t.shape())
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
        // f(grad, input, output)
        g.iter()
            .zip(val(a).data())
            .zip(out.data())
            .map(|((&gi, &x), &y)| f(gi, x, y))
            .collect()
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if needs(v) {
                    accumulate(grads, nodes, v, reduce_to(g, out.shape(), val(v).shape()));
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, reduce_to(g, out.shape(), val(*a).shape()));
            }
            if needs(*b) {
                let r = reduce_to(g, out.shape(), val(*b).shape());
                accumulate(grads, nodes, *b, r.into_iter().map(|x| -x).collect());
            }
        }
        Op::Mul(a, b) => {
            let (ea, eb) = (expand(val(*a), out.shape()), expand(val(*b), out.shape()));
            if needs(*a) {
                let full: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *a, reduce_to(&full, out.shape(), val(*a).shape()));
            }
            if needs(*b) {
                let full: Vec<f64> = g.iter().zip(&ea).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, reduce_to(&full, out.shape(), val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            let eb = expand(val(*b), out.shape());
            if needs(*a) {
                let full: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x / y).collect();
                accumulate(grads, nodes, *a, reduce_to(&full, out.shape(), val(*a).shape()));
            }
            if needs(*b) {
                // d(a/b)/db = -(a/b)/b
                let full: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .zip(&eb)
                    .map(|((gi, q), y)| -gi * q / y)
                    .collect();
                accumulate(grads, nodes, *b, reduce_to(&full, out.shape(), val(*b).shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.iter().map(|x| -x).collect()),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::MulScalar(a, c) => accumulate(grads, nodes, *a, g.iter().map(|x| x * c).collect()),
        Op::Exp(a) => accumulate(grads, nodes, *a, elementwise(*a, &|gi, _, y| gi * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, elementwise(*a, &|gi, x, _| gi / x)),
        Op::Sqrt(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(*a, &|gi, _, y| if y > 0.0 { 0.5 * gi / y } else { 0.0 }),
        ),
        Op::Square(a) => accumulate(grads, nodes, *a, elementwise(*a, &|gi, x, _| 2.0 * gi * x)),
        Op::Softplus(a) => {
            accumulate(grads, nodes, *a, elementwise(*a, &|gi, x, _| gi * sigmoid(x)))
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, elementwise(*a, &|gi, _, y| gi * (1.0 - y * y))),
        Op::Silu(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(*a, &|gi, x, _| {
                let s = sigmoid(x);
                gi * s * (1.0 + x * (1.0 - s))
            }),
        ),
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let d = matmul_dims(ta.shape(), tb.shape(), false).expect("checked in forward");
            if needs(*a) {
                let mut ga = vec![0.0; ta.len()];
                if d.shared_b {
                    gemm_nt(d.batch * d.m, d.n, d.k, g, tb.data(), &mut ga);
                } else {
                    for i in 0..d.batch {
                        gemm_nt(
                            d.m,
                            d.n,
                            d.k,
                            &g[i * d.m * d.n..][..d.m * d.n],
                            &tb.data()[i * d.k * d.n..][..d.k * d.n],
                            &mut ga[i * d.m * d.k..][..d.m * d.k],
                        );
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; tb.len()];
                if d.shared_b {
                    gemm_tn(d.k, d.batch * d.m, d.n, ta.data(), g, &mut gb);
                } else {
                    for i in 0..d.batch {
                        gemm_tn(
                            d.k,
                            d.m,
                            d.n,
                            &ta.data()[i * d.m * d.k..][..d.m * d.k],
                            &g[i * d.m * d.n..][..d.m * d.n],
                            &mut gb[i * d.k * d.n..][..d.k * d.n],
                        );
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatmulNt(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let d = matmul_dims(ta.shape(), tb.shape(), true).expect("checked in forward");
            if needs(*a) {
                let mut ga = vec![0.0; ta.len()];
                for i in 0..d.batch {
                    gemm_nn(
                        d.m,
                        d.n,
                        d.k,
                        &g[i * d.m * d.n..][..d.m * d.n],
                        &tb.data()[i * d.n * d.k..][..d.n * d.k],
                        &mut ga[i * d.m * d.k..][..d.m * d.k],
                    );
                }
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; tb.len()];
                for i in 0..d.batch {
                    gemm_tn(
                        d.n,
                        d.m,
                        d.k,
                        &g[i * d.m * d.n..][..d.m * d.n],
                        &ta.data()[i * d.m * d.k..][..d.m * d.k],
                        &mut gb[i * d.n * d.k..][..d.n * d.k],
                    );
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
            accumulate(grads, nodes, *a, transpose_last2(&gt).into_data());
        }
        Op::Softmax(a) => {
            let w = *out.shape().last().unwrap();
            let mut ga = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(w).zip(out.data().chunks(w)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                ga.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::ScaledSoftmax(a, c) => {
            let w = *out.shape().last().unwrap();
            let mut ga = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(w).zip(out.data().chunks(w)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                ga.extend(gr.iter().zip(yr).map(|(x, y)| c * y * (x - dot)));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::MaskedFill(a, mask) => {
            let mut ga = g.to_vec();
            for chunk in ga.chunks_mut(mask.len()) {
                for (v, &m) in chunk.iter_mut().zip(mask.iter()) {
                    if m {
                        *v = 0.0;
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Conv1d(x, w) => {
            let (tx, tw) = (val(*x), val(*w));
            let d = conv_dims(tx.shape(), tw.shape()).expect("checked in forward");
            let mut gx = needs(*x).then(|| vec![0.0; tx.len()]);
            let mut gw = needs(*w).then(|| vec![0.0; tw.len()]);
            for b in 0..d.batch {
                for j in 0..d.k {
                    let Some((dst, src, n)) = d.window(j) else {
                        continue;
                    };
                    let gout = &g[(b * d.len + dst) * d.c_out..][..n * d.c_out];
                    let wj = &tw.data()[j * d.c_in * d.c_out..][..d.c_in * d.c_out];
                    if let Some(gx) = gx.as_mut() {
                        gemm_nt(
                            n,
                            d.c_out,
                            d.c_in,
                            gout,
                            wj,
                            &mut gx[(b * d.len + src) * d.c_in..][..n * d.c_in],
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm_tn(
                            d.c_in,
                            n,
                            d.c_out,
                            &tx.data()[(b * d.len + src) * d.c_in..][..n * d.c_in],
                            gout,
                            &mut gw[j * d.c_in * d.c_out..][..d.c_in * d.c_out],
                        );
                    }
                }
            }
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, *w, gw);
            }
        }
        Op::Concat(parts, axis) => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let widths: Vec<usize> = parts.iter().map(|p| val(*p).len() / outer.max(1)).collect();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                if needs(*p) {
                    let mut gp = Vec::with_capacity(w * outer);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..][..w]);
                    }
                    accumulate(grads, nodes, *p, gp);
                }
                offset += w;
            }
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let c = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut ga = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    ga.extend(src.iter().map(|x| x * c));
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::LayerNorm(a, inv) => {
            let w = *out.shape().last().unwrap();
            let mut ga = Vec::with_capacity(g.len());
            for ((gr, yr), s) in g.chunks(w).zip(out.data().chunks(w)).zip(inv.iter()) {
                let mg = gr.iter().sum::<f64>() / w as f64;
                let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / w as f64;
                ga.extend(gr.iter().zip(yr).map(|(x, y)| s * (x - mg - y * mgy)));
            }
            accumulate(grads, nodes, *a, ga);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        let y = g.value(g.softmax(x).unwrap());
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_position_gets_zero_weight() {
        let g = Graph::new();
        let x = g.input(Tensor::vector(&[1.0, 2.0, 3.0]));
        // mask marks position 1 as excluded
        let m = g.masked_fill(x, &[false, true, false], &[3]).unwrap();
        let y = g.value(g.softmax(m).unwrap());
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_rejected() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        let m = g.masked_fill(x, &[false, false, true, true], &[2, 2]).unwrap();
        assert!(matches!(g.softmax(m), Err(Error::Domain { .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn domain_errors() {
        let g = Graph::new();
        let z = g.input(Tensor::vector(&[1.0, 0.0]));
        let one = g.input(Tensor::vector(&[1.0, 1.0]));
        assert!(matches!(g.log(z), Err(Error::Domain { .. })));
        assert!(matches!(g.div(one, z), Err(Error::Domain { .. })));
        let neg = g.input(Tensor::vector(&[-1.0]));
        assert!(g.sqrt(neg).is_err());
    }

    #[test]
    fn exp_overflow_is_reported() {
        let g = Graph::new();
        let x = g.input(Tensor::vector(&[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn quadratic_gradient() {
        let g = Graph::new();
        let x = g.var(Tensor::vector(&[1.0, 2.0]));
        let loss = g.sum(g.square(x).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let g = Graph::new();
        let x = g.var(Tensor::vector(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_param_is_single_leaf() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(&[3.0])).unwrap();
        let g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let loss = g.sum(g.mul(a, b).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(&[3.0])).unwrap();
        let g = Graph::inference(&store);
        let loss = g.sum(g.param(w)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(w).is_none());
    }

    #[test]
    fn concat_and_reduce_axis_values() {
        let g = Graph::new();
        let a = g.input(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.sum_axis(c, 0).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 8.0, 10.0]);
        let m = g.mean_axis(c, 1).unwrap();
        assert_eq!(g.value(m).data(), &[8.0 / 3.0, 13.0 / 3.0]);
    }

    #[test]
    fn conv_with_centre_tap_is_pointwise() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.input(Tensor::new(&[3, 1, 1], vec![0.0, 2.0, 0.0]).unwrap());
        assert_eq!(g.value(g.conv1d(x, w).unwrap()).data(), &[2.0, 4.0, 6.0]);
        let w = g.input(Tensor::new(&[3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap());
        // left tap reads the previous element, zero padded
        assert_eq!(g.value(g.conv1d(x, w).unwrap()).data(), &[0.0, 1.0, 2.0]);
    }
}
