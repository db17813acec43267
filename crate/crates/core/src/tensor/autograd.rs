//! Recorded operations and their vector-Jacobian products.

use super::kernels::{self, ConvGeom};
use super::ops::ElemOp;
use super::Tensor;
use crate::Scalar;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Elem { op: ElemOp, a: Tensor<T>, b: Tensor<T> },
    AddScalar { a: Tensor<T> },
    MulScalar { a: Tensor<T>, c: T },
    Exp { a: Tensor<T> },
    Ln { a: Tensor<T> },
    Relu { a: Tensor<T> },
    Sigmoid { a: Tensor<T> },
    Tanh { a: Tensor<T> },
    MatMul { a: Tensor<T>, b: Tensor<T> },
    Transpose { a: Tensor<T> },
    Reshape { a: Tensor<T> },
    Sum { a: Tensor<T> },
    Softmax { a: Tensor<T>, axis: usize },
    LogSoftmax { a: Tensor<T>, axis: usize },
    Conv2d { input: Tensor<T>, kernel: Tensor<T>, geom: ConvGeom, cols: Vec<T> },
    ChannelBias { x: Tensor<T>, b: Tensor<T> },
    Upsample { a: Tensor<T>, channels: usize, from: (usize, usize), to: (usize, usize) },
    AvgPool { a: Tensor<T>, channels: usize, from: (usize, usize), to: (usize, usize) },
    Concat { parts: Vec<Tensor<T>>, axis: usize },
    GatherRows { table: Tensor<T>, idx: Vec<usize> },
    RepeatRows { a: Tensor<T>, times: usize },
}

impl<T: Scalar> Op<T> {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf)
    }

    pub fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Elem { a, b, .. } | Op::MatMul { a, b } => vec![a, b],
            Op::AddScalar { a }
            | Op::MulScalar { a, .. }
            | Op::Exp { a }
            | Op::Ln { a }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Upsample { a, .. }
            | Op::AvgPool { a, .. }
            | Op::RepeatRows { a, .. } => vec![a],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::ChannelBias { x, b } => vec![x, b],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::GatherRows { table, .. } => vec![table],
        }
    }

    /// Pushes the upstream gradient `g` of `out` into the op's inputs.
    pub fn propagate(&self, out: &Tensor<T>, g: &[T]) {
        match self {
            Op::Leaf => {}
            Op::Elem { op, a, b } => elem_backward(*op, a, b, g),
            Op::AddScalar { a } => grad_into(a, |ga| add_assign(ga, g)),
            Op::MulScalar { a, c } => grad_into(a, |ga| {
                for (x, &gv) in ga.iter_mut().zip(g) {
                    *x += gv * *c;
                }
            }),
            Op::Exp { a } => grad_into(a, |ga| {
                for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gv * y;
                }
            }),
            Op::Ln { a } => grad_into(a, |ga| {
                for ((x, &gv), &v) in ga.iter_mut().zip(g).zip(a.data()) {
                    *x += gv / v;
                }
            }),
            Op::Relu { a } => grad_into(a, |ga| {
                for ((x, &gv), &v) in ga.iter_mut().zip(g).zip(a.data()) {
                    if v > T::zero() {
                        *x += gv;
                    }
                }
            }),
            Op::Sigmoid { a } => grad_into(a, |ga| {
                for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gv * y * (T::one() - y);
                }
            }),
            Op::Tanh { a } => grad_into(a, |ga| {
                for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gv * (T::one() - y * y);
                }
            }),
            Op::MatMul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                grad_into(a, |ga| kernels::gemm_nt(m, n, k, g, b.data(), ga));
                grad_into(b, |gb| kernels::gemm_tn(k, m, n, a.data(), g, gb));
            }
            Op::Transpose { a } => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                grad_into(a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape { a } => grad_into(a, |ga| add_assign(ga, g)),
            Op::Sum { a } => grad_into(a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = kernels::axis_split(a.shape(), *axis);
                let y = out.data();
                grad_into(a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let mut s = T::zero();
                            for k in 0..len {
                                s += g[at(k)] * y[at(k)];
                            }
                            for k in 0..len {
                                ga[at(k)] += y[at(k)] * (g[at(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = kernels::axis_split(a.shape(), *axis);
                let y = out.data();
                grad_into(a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let mut s = T::zero();
                            for k in 0..len {
                                s += g[at(k)];
                            }
                            for k in 0..len {
                                ga[at(k)] += g[at(k)] - y[at(k)].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let c_out = kernel.shape()[0];
                let (rows, n) = (geom.col_rows(), geom.col_cols());
                grad_into(kernel, |gk| kernels::gemm_nt(c_out, n, rows, g, cols, gk));
                if input.requires_grad() {
                    let mut gcols = vec![T::zero(); rows * n];
                    kernels::gemm_tn(rows, c_out, n, kernel.data(), g, &mut gcols);
                    grad_into(input, |gi| kernels::col2im(*geom, &gcols, gi));
                }
            }
            Op::ChannelBias { x, b } => {
                let c = b.numel();
                let plane = x.numel() / c;
                grad_into(x, |gx| add_assign(gx, g));
                grad_into(b, |gb| {
                    for ch in 0..c {
                        let mut s = T::zero();
                        for &v in &g[ch * plane..(ch + 1) * plane] {
                            s += v;
                        }
                        gb[ch] += s;
                    }
                });
            }
            Op::Upsample { a, channels, from, to } => {
                grad_into(a, |ga| kernels::upsample_backward(g, *channels, *from, *to, ga));
            }
            Op::AvgPool { a, channels, from, to } => {
                let (h, w) = *from;
                let (oh, ow) = *to;
                let (bh, bw) = (h / oh, w / ow);
                let scale = T::one() / T::count(bh * bw);
                grad_into(a, |ga| {
                    for c in 0..*channels {
                        for y in 0..h {
                            for x in 0..w {
                                ga[c * h * w + y * w + x] +=
                                    g[c * oh * ow + (y / bh) * ow + x / bw] * scale;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = out.shape();
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    grad_into(p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            add_assign(dst, src);
                        }
                    });
                    offset += len;
                }
            }
            Op::GatherRows { table, idx } => {
                let d = table.shape()[1];
                grad_into(table, |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_assign(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::RepeatRows { a, times } => {
                let n = a.numel();
                grad_into(a, |ga| {
                    for r in 0..*times {
                        add_assign(ga, &g[r * n..(r + 1) * n]);
                    }
                });
            }
        }
    }
}

fn grad_into<T: Scalar>(t: &Tensor<T>, f: impl FnOnce(&mut [T])) {
    if t.requires_grad() {
        t.accumulate_grad(f);
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn elem_backward<T: Scalar>(op: ElemOp, a: &Tensor<T>, b: &Tensor<T>, g: &[T]) {
    let n = g.len();
    let av = |i: usize| if a.numel() == 1 { a.data()[0] } else { a.data()[i] };
    let bv = |i: usize| if b.numel() == 1 { b.data()[0] } else { b.data()[i] };
    // Partial derivatives of the op w.r.t. each side at element i.
    let (da, db): (Box<dyn Fn(usize) -> T>, Box<dyn Fn(usize) -> T>) = match op {
        ElemOp::Add => (Box::new(|_| T::one()), Box::new(|_| T::one())),
        ElemOp::Sub => (Box::new(|_| T::one()), Box::new(|_| -T::one())),
        ElemOp::Mul => (Box::new(bv), Box::new(av)),
        ElemOp::Div => (
            Box::new(move |i| T::one() / bv(i)),
            Box::new(move |i| -av(i) / (bv(i) * bv(i))),
        ),
    };
    for (side, d) in [(a, &da), (b, &db)] {
        grad_into(side, |gs| {
            if side.numel() == 1 && n != 1 {
                let mut s = T::zero();
                for (i, &gv) in g.iter().enumerate() {
                    s += gv * d(i);
                }
                gs[0] += s;
            } else {
                for (i, (x, &gv)) in gs.iter_mut().zip(g).enumerate() {
                    *x += gv * d(i);
                }
            }
        });
    }
}
