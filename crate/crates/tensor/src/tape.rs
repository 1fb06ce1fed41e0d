//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and the input handles it
//! needs to replay the chain rule. Nodes are pushed in evaluation order, so the
//! node list is already topologically sorted and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::{
    check_square_projection, conv1d_backward, finite, group_norm_forward, matmul_at_into,
    matmul_bt_into, silu_grad, ConvGeom, Tensor,
};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Sqrt(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    AddChannel(usize, usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    ConcatChannels(usize, usize),
    UpsampleNearest(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor.with_requires_grad(false), Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable does not belong to this tape");
        &self.nodes[var.idx].value
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.idx >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(var.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[a].value.sub(&self.nodes[b].value)?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[a].value.mul(&self.nodes[b].value)?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.add_scalar(s)?;
        Ok(self.record(v, Op::AddScalar(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.scale(s)?;
        Ok(self.record(v, Op::Scale(a, s), &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.sqrt()?;
        Ok(self.record(v, Op::Sqrt(a), &[a]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.silu()?;
        Ok(self.record(v, Op::Silu(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.sum()?;
        Ok(self.record(v, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.mean()?;
        Ok(self.record(v, Op::Mean(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.transpose()?;
        Ok(self.record(v, Op::Transpose(a), &[a]))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, w) = (self.idx(x)?, self.idx(w)?);
        let v = self.nodes[x]
            .value
            .conv1d(&self.nodes[w].value, stride, pad)?;
        Ok(self.record(v, Op::Conv1d { x, w, stride, pad }, &[x, w]))
    }

    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.idx(x)?, self.idx(bias)?);
        let v = self.nodes[x].value.add_channel(&self.nodes[b].value)?;
        Ok(self.record(v, Op::AddChannel(x, b), &[x, b]))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (x, gamma, beta) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (v, xhat, inv_std) = group_norm_forward(
            &self.nodes[x].value,
            groups,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        )?;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        };
        Ok(self.record(v, op, &[x, gamma, beta]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.softmax_rows()?;
        Ok(self.record(v, Op::SoftmaxRows(a), &[a]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[a].value.concat_channels(&self.nodes[b].value)?;
        Ok(self.record(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.upsample_nearest(factor)?;
        Ok(self.record(v, Op::UpsampleNearest(a, factor), &[a]))
    }

    /// Single-head self-attention composed from recorded primitives.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
        let (c, _) = self.value(x).dims2("self_attention")?;
        check_square_projection(c, self.value(wq), self.value(wk), self.value(wv))?;
        let q = self.matmul(wq, x)?;
        let k = self.matmul(wk, x)?;
        let v = self.matmul(wv, x)?;
        let qt = self.transpose(q)?;
        let logits = self.matmul(qt, k)?;
        let logits = self.scale(logits, 1.0 / (c as f64).sqrt())?;
        let attn = self.softmax_rows(logits)?;
        let attn_t = self.transpose(attn)?;
        self.matmul(v, attn_t)
    }

    /// Mean of squared differences between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Consumes the tape and returns the gradient of `loss` for every leaf that
    /// requires one. Leaves unreachable from `loss` get zero gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_idx = self.idx(loss)?;
        let loss_shape = self.nodes[loss_idx].value.shape().to_vec();
        if self.nodes[loss_idx].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_idx] = Some(vec![1.0]);

        for i in (0..=loss_idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let t = finite("backward", Tensor::new(shape, data)?)?;
                out.grads.insert(
                    Var {
                        tape: self.id,
                        idx: i,
                    },
                    t,
                );
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(buf);
        };
        let val = |j: usize| nodes[j].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(bv)
                        .for_each(|((d, g), b)| *d += g * b)
                });
                acc(*b, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((d, g), a)| *d += g * a)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| axpy(d, g, 1.0)),
            Op::Scale(a, s) => acc(*a, &mut |d| axpy(d, g, *s)),
            Op::Sqrt(a) => {
                let y = nodes[i].value.data();
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * 0.5 / y)
                });
            }
            Op::Silu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, g), &x)| *d += g * silu_grad(x))
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims(&nodes[*a].value);
                let (_, n) = dims(&nodes[*b].value);
                let (av, bv) = (val(*a), val(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |d| matmul_bt_into(g, bv, d, m, n, k));
                acc(*b, &mut |d| matmul_at_into(av, g, d, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = dims(&nodes[*a].value);
                acc(*a, &mut |d| {
                    for p in 0..r {
                        for q in 0..c {
                            d[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, stride, pad } => {
                let geom = ConvGeom::new(&nodes[*x].value, &nodes[*w].value, *stride, *pad)
                    .expect("geometry validated in forward");
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    conv1d_backward(&geom, xv, wv, g, Some(d), None)
                });
                acc(*w, &mut |d| {
                    conv1d_backward(&geom, xv, wv, g, None, Some(d))
                });
            }
            Op::AddChannel(x, b) => {
                let (_, t) = dims(&nodes[*x].value);
                acc(*x, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| {
                    for (db, row) in d.iter_mut().zip(g.chunks(t)) {
                        *db += row.iter().sum::<f64>();
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (c, t) = dims(&nodes[*x].value);
                let gm = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (ch, dc) in d.iter_mut().enumerate().take(c) {
                        let r = ch * t..(ch + 1) * t;
                        *dc += g[r.clone()]
                            .iter()
                            .zip(&xhat[r])
                            .map(|(g, h)| g * h)
                            .sum::<f64>();
                    }
                });
                acc(*beta, &mut |d| {
                    for ch in 0..c {
                        d[ch] += g[ch * t..(ch + 1) * t].iter().sum::<f64>();
                    }
                });
                acc(*x, &mut |d| {
                    let cg = c / groups;
                    let n = (cg * t) as f64;
                    for (grp, &r) in inv_std.iter().enumerate() {
                        let span = grp * cg * t..(grp + 1) * cg * t;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for k in span.clone() {
                            let dh = g[k] * gm[k / t];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[k];
                        }
                        for k in span {
                            let dh = g[k] * gm[k / t];
                            d[k] += r / n * (n * dh - sum_dh - xhat[k] * sum_dh_h);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = dims(&nodes[*a].value);
                let y = nodes[i].value.data();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let na = nodes[*a].value.numel();
                acc(*a, &mut |d| axpy(d, &g[..na], 1.0));
                acc(*b, &mut |d| axpy(d, &g[na..], 1.0));
            }
            Op::UpsampleNearest(a, factor) => {
                acc(*a, &mut |d| {
                    for (dv, chunk) in d.iter_mut().zip(g.chunks(*factor)) {
                        *dv += chunk.iter().sum::<f64>();
                    }
                });
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2("backward").expect("rank checked in forward")
}

fn axpy(d: &mut [f64], g: &[f64], s: f64) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += s * g;
    }
}
