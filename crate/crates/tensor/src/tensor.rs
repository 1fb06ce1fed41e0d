//! Dense row-major `f64` tensors and the forward kernels shared with the tape.
//!
//! Broadcasting is deliberately absent: binary ops take equal shapes or a
//! scalar, and the only channel broadcast is the explicit [`Tensor::add_channel`].

use crate::error::{Result, TensorError};

/// Variance floor used by group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("full: shape must have positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(&mut f).collect())
            .expect("from_fn: shape must have positive extents")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        finite(
            op,
            Tensor {
                shape: self.shape.clone(),
                data: self.data.iter().map(|&v| f(v)).collect(),
                requires_grad: false,
            },
        )
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        finite(
            op,
            Tensor {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
                requires_grad: false,
            },
        )
    }

    pub fn elementwise(&self, kind: Elementwise, rhs: Operand<'_>) -> Result<Tensor> {
        match (kind, rhs) {
            (Elementwise::Add, Operand::Tensor(b)) => self.add(b),
            (Elementwise::Add, Operand::Scalar(s)) => self.add_scalar(s),
            (Elementwise::Sub, Operand::Tensor(b)) => self.sub(b),
            (Elementwise::Sub, Operand::Scalar(s)) => self.add_scalar(-s),
            (Elementwise::Mul, Operand::Tensor(b)) => self.mul(b),
            (Elementwise::Mul | Elementwise::Scale, Operand::Scalar(s)) => self.scale(s),
            (Elementwise::Scale, Operand::Tensor(b)) => self.scale(b.item()?),
            (Elementwise::Sqrt, _) => self.sqrt(),
            (Elementwise::Silu, _) => self.silu(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.map("add_scalar", |v| v + s)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map("scale", |v| v * s)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        self.map("sqrt", f64::sqrt)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.map("silu", silu)
    }

    pub fn sum(&self) -> Result<Tensor> {
        finite("sum", Tensor::scalar(self.data.iter().sum()))
    }

    pub fn mean(&self) -> Result<Tensor> {
        finite(
            "mean",
            Tensor::scalar(self.data.iter().sum::<f64>() / self.numel() as f64),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        finite("matmul", Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Same-padded (or strided) 1-D convolution of a `C_in×T` signal with a
    /// `C_out×C_in×K` kernel.
    pub fn conv1d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geom = ConvGeom::new(self, kernel, stride, pad)?;
        let mut out = vec![0.0; geom.c_out * geom.t_out];
        conv1d_forward(&geom, &self.data, &kernel.data, &mut out);
        finite("conv1d", Tensor::new(vec![geom.c_out, geom.t_out], out)?)
    }

    /// Adds a per-channel vector (any shape holding `C` values) across time.
    pub fn add_channel(&self, bias: &Tensor) -> Result<Tensor> {
        let (c, t) = self.dims2("add_channel")?;
        if bias.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for (row, &b) in out.chunks_mut(t).zip(&bias.data) {
            row.iter_mut().for_each(|v| *v += b);
        }
        finite("add_channel", Tensor::new(vec![c, t], out)?)
    }

    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        Ok(group_norm_forward(self, groups, gamma, beta)?.0)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2("softmax_rows")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        finite("softmax_rows", Tensor::new(self.shape.clone(), out)?)
    }

    /// Single-head self-attention over time for a `C×T` signal.
    ///
    /// Returns `V·softmax(QᵀK/√C)ᵀ`; the residual connection belongs to the caller.
    pub fn self_attention(&self, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
        let (c, _) = self.dims2("self_attention")?;
        check_square_projection(c, wq, wk, wv)?;
        let q = wq.matmul(self)?;
        let k = wk.matmul(self)?;
        let v = wv.matmul(self)?;
        let logits = q.transpose()?.matmul(&k)?.scale(1.0 / (c as f64).sqrt())?;
        let attn = logits.softmax_rows()?;
        v.matmul(&attn.transpose()?)
    }

    /// Stacks two `C×T` signals along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (c1, t1) = self.dims2("concat_channels")?;
        let (c2, t2) = other.dims2("concat_channels")?;
        if t1 != t2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity((c1 + c2) * t1);
        out.extend_from_slice(&self.data);
        out.extend_from_slice(&other.data);
        Tensor::new(vec![c1 + c2, t1], out)
    }

    /// Nearest-neighbour upsampling along time by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (c, t) = self.dims2("upsample_nearest")?;
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                reason: "factor must be positive".into(),
            });
        }
        let mut out = Vec::with_capacity(c * t * factor);
        for row in self.data.chunks(t) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        Tensor::new(vec![c, t * factor], out)
    }
}

/// Elementwise operation kinds accepted by [`Tensor::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Sqrt,
    Silu,
}

/// Right-hand side of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

pub(crate) fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn check_square_projection(
    c: usize,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<()> {
    for w in [wq, wk, wv] {
        if w.shape() != [c, c] {
            return Err(TensorError::ShapeMismatch {
                op: "self_attention",
                lhs: vec![c, c],
                rhs: w.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, t_in) = x.dims2("conv1d")?;
        let (c_out, kc, k) = match kernel.shape() {
            &[o, c, k] => (o, c, k),
            s => {
                return Err(TensorError::Rank {
                    op: "conv1d",
                    expected: 3,
                    got: s.to_vec(),
                })
            }
        };
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                reason: "stride must be positive".into(),
            });
        }
        if k > t_in + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                reason: format!(
                    "kernel width {k} exceeds padded input length {}",
                    t_in + 2 * pad
                ),
            });
        }
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        Ok(Self {
            c_in,
            c_out,
            k,
            t_in,
            t_out,
            stride,
            pad,
        })
    }

    /// Output positions `t` whose input tap `t*stride + j - pad` lands in range.
    fn valid_range(&self, j: usize) -> (usize, usize) {
        let (s, p, j) = (self.stride as isize, self.pad as isize, j as isize);
        let lo = if p > j { (p - j + s - 1) / s } else { 0 };
        let last = self.t_in as isize - 1 + p - j;
        let hi = if last < 0 {
            0
        } else {
            (last / s + 1).min(self.t_out as isize)
        };
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    for o in 0..g.c_out {
        let out_row = &mut out[o * g.t_out..(o + 1) * g.t_out];
        for c in 0..g.c_in {
            let x_row = &x[c * g.t_in..(c + 1) * g.t_in];
            for j in 0..g.k {
                let wv = w[(o * g.c_in + c) * g.k + j];
                let (lo, hi) = g.valid_range(j);
                if g.stride == 1 {
                    let off = lo + j - g.pad;
                    for (o_v, &x_v) in out_row[lo..hi].iter_mut().zip(&x_row[off..off + hi - lo]) {
                        *o_v += wv * x_v;
                    }
                } else {
                    for t in lo..hi {
                        out_row[t] += wv * x_row[t * g.stride + j - g.pad];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for o in 0..g.c_out {
            let g_row = &grad[o * g.t_out..(o + 1) * g.t_out];
            for c in 0..g.c_in {
                let dx_row = &mut dx[c * g.t_in..(c + 1) * g.t_in];
                for j in 0..g.k {
                    let wv = w[(o * g.c_in + c) * g.k + j];
                    let (lo, hi) = g.valid_range(j);
                    for t in lo..hi {
                        dx_row[t * g.stride + j - g.pad] += wv * g_row[t];
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for o in 0..g.c_out {
            let g_row = &grad[o * g.t_out..(o + 1) * g.t_out];
            for c in 0..g.c_in {
                let x_row = &x[c * g.t_in..(c + 1) * g.t_in];
                for j in 0..g.k {
                    let (lo, hi) = g.valid_range(j);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        acc += g_row[t] * x_row[t * g.stride + j - g.pad];
                    }
                    dw[(o * g.c_in + c) * g.k + j] += acc;
                }
            }
        }
    }
}

/// Group-norm forward; also returns the normalized values and per-group
/// inverse standard deviations for the backward pass.
pub(crate) fn group_norm_forward(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (c, t) = x.dims2("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::InvalidArgument {
            op: "group_norm",
            reason: format!("{c} channels are not divisible into {groups} groups"),
        });
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(TensorError::ShapeMismatch {
            op: "group_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let per_group = (c / groups) * t;
    let mut xhat = vec![0.0; c * t];
    let mut inv_std = Vec::with_capacity(groups);
    for (src, dst) in x.data().chunks(per_group).zip(xhat.chunks_mut(per_group)) {
        let n = per_group as f64;
        let rough = src.iter().sum::<f64>() / n;
        let mean = rough + src.iter().map(|v| v - rough).sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        inv_std.push(r);
    }
    let mut out = xhat.clone();
    for (ch, row) in out.chunks_mut(t).enumerate() {
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        row.iter_mut().for_each(|v| *v = gm * *v + bt);
    }
    Ok((
        finite("group_norm", Tensor::new(vec![c, t], out)?)?,
        xhat,
        inv_std,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_identity_scale() {
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let x = Tensor::new([3], vec![0.1, -7.25, 1e-300]).unwrap();
        assert_eq!(x.scale(1.0).unwrap(), x);
        assert_eq!(
            a.elementwise(Elementwise::Add, Operand::Tensor(&b))
                .unwrap()
                .data(),
            &[4.0, 6.0]
        );
    }

    #[test]
    fn elementwise_errors() {
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
        let neg = Tensor::new([1], vec![-1.0]).unwrap();
        assert_eq!(neg.sqrt(), Err(TensorError::Domain { op: "sqrt" }));
        let big = Tensor::new([1], vec![f64::MAX]).unwrap();
        assert_eq!(big.scale(10.0), Err(TensorError::NonFinite { op: "scale" }));
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.25, 9.0, -1.0]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap(), x);
        let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::ones([2, 1]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        assert!(a.matmul(&x.transpose().unwrap()).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let x = Tensor::new([1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let id = Tensor::ones([1, 1, 1]);
        assert_eq!(x.conv1d(&id, 1, 0).unwrap(), x);

        let x = Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let boxk = Tensor::ones([1, 1, 3]);
        assert_eq!(x.conv1d(&boxk, 1, 1).unwrap().data(), &[1.0, 1.0, 1.0]);

        let wide = Tensor::ones([1, 1, 7]);
        assert!(x.conv1d(&wide, 1, 1).is_err());
    }

    #[test]
    fn strided_conv_halves_length() {
        let x = Tensor::from_fn([2, 8], |i| i as f64);
        let k = Tensor::ones([3, 2, 3]);
        let y = x.conv1d(&k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        // position 0 sees taps -1, 0, 1 → row0: 0+1, row1: 8+9
        assert_eq!(y.data()[0], 18.0);
        // position 1 sees taps 1, 2, 3
        assert_eq!(y.data()[1], (1 + 2 + 3 + 9 + 10 + 11) as f64);
    }

    #[test]
    fn group_norm_constant_input_returns_beta() {
        let x = Tensor::full([4, 6], 3.7);
        let gamma = Tensor::from_fn([4], |i| 1.0 + i as f64);
        let beta = Tensor::from_fn([4], |i| -0.5 * i as f64);
        let y = x.group_norm(2, &gamma, &beta).unwrap();
        for (ch, row) in y.data().chunks(6).enumerate() {
            assert!(row.iter().all(|&v| v == beta.data()[ch]));
        }
        assert!(x.group_norm(3, &gamma, &beta).is_err());
    }

    #[test]
    fn group_norm_single_group_standardizes() {
        let x = Tensor::from_fn([3, 10], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0);
        let y = x
            .group_norm(1, &Tensor::ones([3]), &Tensor::zeros([3]))
            .unwrap();
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_single_position_and_zero_logits() {
        let x = Tensor::new([2, 1], vec![0.5, -1.5]).unwrap();
        let wq = Tensor::new([2, 2], vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let wk = Tensor::new([2, 2], vec![-0.7, 0.9, 0.2, 0.1]).unwrap();
        let wv = Tensor::new([2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let out = x.self_attention(&wq, &wk, &wv).unwrap();
        let expected = wv.matmul(&x).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        let x = Tensor::from_fn([2, 5], |i| (i as f64).sin());
        let zero = Tensor::zeros([2, 2]);
        let out = x.self_attention(&zero, &zero, &wv).unwrap();
        let v = wv.matmul(&x).unwrap();
        for (row_out, row_v) in out.data().chunks(5).zip(v.data().chunks(5)) {
            let mean = row_v.iter().sum::<f64>() / 5.0;
            assert!(row_out.iter().all(|&o| (o - mean).abs() < 1e-12));
        }
    }

    #[test]
    fn upsample_and_concat() {
        let x = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            x.upsample_nearest(2).unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        );
        let y = Tensor::new([1, 2], vec![5.0, 6.0]).unwrap();
        let c = x.concat_channels(&y).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
