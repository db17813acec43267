//! Differentiable tensor operations.

use super::autograd::Op;
use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::Scalar;

/// Binary element-wise operation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElemOp {
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
            ElemOp::Div => a / b,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Element-wise binary op. Shapes must be equal, or one side must hold a
    /// single element (scalar broadcast).
    pub fn elementwise(&self, op: ElemOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self, other);
        let shape = if a.shape() == b.shape() || b.numel() == 1 {
            a.shape().to_vec()
        } else if a.numel() == 1 {
            b.shape().to_vec()
        } else {
            return shape_err(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let data = match (a.numel() == n, b.numel() == n) {
            (true, true) => a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect(),
            (true, false) => {
                let y = b.data()[0];
                a.data().iter().map(|&x| op.apply(x, y)).collect()
            }
            _ => {
                let x = a.data()[0];
                b.data().iter().map(|&y| op.apply(x, y)).collect()
            }
        };
        Ok(Tensor::from_op(data, shape, Op::Elem { op, a: a.clone(), b: b.clone() }))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElemOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElemOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElemOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElemOp::Div, other)
    }

    pub fn add_scalar(&self, c: impl Into<f64>) -> Tensor<T> {
        let c = T::lit(c.into());
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar { a: self.clone() })
    }

    pub fn mul_scalar(&self, c: impl Into<f64>) -> Tensor<T> {
        self.scale(T::lit(c.into()))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::MulScalar { a: self.clone(), c })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: impl Into<f64>) -> Tensor<T> {
        self.neg().add_scalar(c)
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), Op::Exp { a: self.clone() })
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), Op::Ln { a: self.clone() })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid_scalar, Op::Sigmoid { a: self.clone() })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), Op::Tanh { a: self.clone() })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(vec![s], Vec::new(), Op::Sum { a: self.clone() })
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(T::one() / T::count(self.numel()))
    }

    /// Matrix product of `m×k` and `k×n` tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self, other);
        if a.rank() != 2 || b.rank() != 2 {
            return shape_err(format!("matmul needs rank-2 inputs, got {:?} and {:?}", a.shape(), b.shape()));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return shape_err(format!("matmul inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()));
        }
        let mut data = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut data);
        Ok(Tensor::from_op(data, vec![m, n], Op::MatMul { a: a.clone(), b: b.clone() }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return shape_err(format!("transpose needs rank 2, got {:?}", self.shape()));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(data, vec![c, r], Op::Transpose { a: self.clone() }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape { a: self.clone() }))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for shape {:?}", self.shape()));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis)?;
        let data = softmax_values(self.data(), self.shape(), axis, false);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Softmax { a: self.clone(), axis }))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis)?;
        let data = softmax_values(self.data(), self.shape(), axis, true);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::LogSoftmax { a: self.clone(), axis }))
    }

    /// 3×3 convolution with zero padding 1. `self` is `C_in×H×W`, `kernel`
    /// is `C_out×C_in×3×3`; stride must be 1 or 2.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("unsupported conv stride {stride}")));
        }
        if self.rank() != 3 {
            return shape_err(format!("conv2d input must be C×H×W, got {:?}", self.shape()));
        }
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h < 3 || w < 3 {
            return shape_err(format!("conv2d input {h}×{w} smaller than 3×3"));
        }
        let ks = kernel.shape();
        if ks.len() != 4 || ks[1] != c_in || ks[2] != 3 || ks[3] != 3 {
            return shape_err(format!("conv2d kernel {ks:?} incompatible with input {:?}", self.shape()));
        }
        let c_out = ks[0];
        let geom = ConvGeom { c_in, h, w, stride };
        let (rows, n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * n];
        kernels::im2col(geom, self.data(), &mut cols);
        let mut data = vec![T::zero(); c_out * n];
        kernels::gemm_nn(c_out, rows, n, kernel.data(), &cols, &mut data);
        let cols = if self.requires_grad() || kernel.requires_grad() { cols } else { Vec::new() };
        Ok(Tensor::from_op(
            data,
            vec![c_out, geom.out_h(), geom.out_w()],
            Op::Conv2d { input: self.clone(), kernel: kernel.clone(), geom, cols },
        ))
    }

    /// Adds a per-channel bias `b` (length C) to a `C×…` tensor.
    pub fn add_channel_bias(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let c = b.numel();
        if self.rank() < 2 || self.shape()[0] != c {
            return shape_err(format!("channel bias of length {c} vs tensor {:?}", self.shape()));
        }
        let plane = self.numel() / c;
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i / plane])
            .collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::ChannelBias { x: self.clone(), b: b.clone() }))
    }

    /// Align-corners bilinear upsampling of a `C×h×w` tensor to `C×H×W`.
    pub fn bilinear_upsample(&self, target: (usize, usize)) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return shape_err(format!("upsample input must be C×h×w, got {:?}", self.shape()));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = target;
        if oh < h || ow < w {
            return shape_err(format!("upsample target {oh}×{ow} smaller than source {h}×{w}"));
        }
        let mut data = vec![T::zero(); c * oh * ow];
        kernels::upsample_forward(self.data(), c, (h, w), (oh, ow), &mut data);
        Ok(Tensor::from_op(
            data,
            vec![c, oh, ow],
            Op::Upsample { a: self.clone(), channels: c, from: (h, w), to: (oh, ow) },
        ))
    }

    /// Block average pooling of `C×h×w` down to `C×oh×ow`; `h`, `w` must be
    /// multiples of the target.
    pub fn avg_pool(&self, target: (usize, usize)) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return shape_err(format!("avg_pool input must be C×h×w, got {:?}", self.shape()));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = target;
        if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
            return shape_err(format!("cannot pool {h}×{w} into {oh}×{ow}"));
        }
        let (bh, bw) = (h / oh, w / ow);
        let scale = T::one() / T::count(bh * bw);
        let mut data = vec![T::zero(); c * oh * ow];
        let src = self.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[ch * oh * ow + (y / bh) * ow + x / bw] += src[ch * h * w + y * w + x];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        Ok(Tensor::from_op(
            data,
            vec![c, oh, ow],
            Op::AvgPool { a: self.clone(), channels: c, from: (h, w), to: (oh, ow) },
        ))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        first.check_axis(axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().enumerate().all(|(i, &d)| i == axis || d == first.shape()[i]);
            if !ok {
                return shape_err(format!("concat shape mismatch: {:?} vs {:?}", p.shape(), first.shape()));
            }
            shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        Ok(Tensor::from_op(data, shape, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Selects rows of a `V×d` table.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return shape_err(format!("gather_rows needs a rank-2 table, got {:?}", self.shape()));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if idx.is_empty() {
            return shape_err("gather_rows with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("row index {bad} out of range for {v} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::from_op(data, vec![idx.len(), d], Op::GatherRows { table: self.clone(), idx: idx.to_vec() }))
    }

    /// Stacks `times` copies of a `1×n` row into `times×n`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.shape()[0] != 1 || times == 0 {
            return shape_err(format!("repeat_rows needs a 1×n row, got {:?}", self.shape()));
        }
        let mut data = Vec::with_capacity(times * self.numel());
        for _ in 0..times {
            data.extend_from_slice(self.data());
        }
        Ok(Tensor::from_op(data, vec![times, self.shape()[1]], Op::RepeatRows { a: self.clone(), times }))
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_values<T: Scalar>(src: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = kernels::axis_split(shape, axis);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(src[at(k)]);
            }
            let mut s = T::zero();
            for k in 0..len {
                s += (src[at(k)] - m).exp();
            }
            if log {
                let ls = s.ln();
                for k in 0..len {
                    out[at(k)] = src[at(k)] - m - ls;
                }
            } else {
                for k in 0..len {
                    out[at(k)] = (src[at(k)] - m).exp() / s;
                }
            }
        }
    }
    out
}
