//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! All matrices are dense row-major. Accumulation order is fixed, so results
//! are bit-reproducible for identical inputs.

use crate::Scalar;

/// `c += a · b` where `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` where `a` is `m×k`, `b` is `n×k`, `c` is `m×n`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` where `a` is `k×m`, `b` is `k×n`, `c` is `m×n`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators (fixed order).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a 3×3, pad-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 - 3) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 - 3) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * 9
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `input` (`c_in×h×w`) into a `(c_in·9)×(oh·ow)` column matrix.
pub fn im2col<T: Scalar>(g: ConvGeom, input: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..((ci * 9) + ky * 3 + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `grad_input`.
pub fn col2im<T: Scalar>(g: ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..((ci * 9) + ky * 3 + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One axis of an align-corners bilinear resampling: for each output index,
/// the two source indices and the weight of the upper one.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = (o * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Align-corners bilinear resize of `channels` planes from `h×w` to `oh×ow`.
pub fn upsample_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::lit(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::lit(fx);
                let gx = T::one() - fx;
                dst[oy * ow + ox] = gy * (gx * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                    + fy * (gx * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
            }
        }
    }
}

/// Adjoint of [`upsample_forward`].
pub fn upsample_backward<T: Scalar>(
    grad_out: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    grad_in: &mut [T],
) {
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut grad_in[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::lit(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::lit(fx);
                let gx = T::one() - fx;
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += gy * gx * v;
                dst[y0 * w + x1] += gy * fx * v;
                dst[y1 * w + x0] += fy * gx * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)` strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
