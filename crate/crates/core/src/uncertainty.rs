//! Semantic-consistency uncertainty and the exponential sample weight.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHyper {
    /// Weight of the semantic term in the joint uncertainty.
    pub beta_vl: f64,
    /// Temperature of the exponential weight.
    pub lambda_u: f64,
    pub eps1: f64,
    /// Soft Dice smoothing.
    pub eps_dice: f64,
}

impl Default for UncertaintyHyper {
    fn default() -> Self {
        Self { beta_vl: 0.5, lambda_u: 1.0, eps1: 1e-6, eps_dice: 1e-6 }
    }
}

impl UncertaintyHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_vl >= 0.0 && self.lambda_u >= 0.0 && self.eps1 > 0.0 && self.eps_dice > 0.0;
        if !ok || ![self.beta_vl, self.lambda_u, self.eps1, self.eps_dice].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("invalid uncertainty hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample uncertainty terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub s_vl: f64,
    pub u_vl: f64,
    pub l_dice: f64,
    pub u: f64,
    pub w: f64,
}

/// Confidence-weighted channel average of `z` (`C×H×W`) under `p` (`H×W`):
/// `Σ z·p / (Σ p + ε₁)` per channel. Differentiable in both inputs.
pub fn masked_global_embedding<T: Scalar>(z: &Tensor<T>, p: &Tensor<T>, eps1: f64) -> Result<Tensor<T>> {
    if z.rank() != 3 || p.rank() != 2 || z.shape()[1..] != *p.shape() {
        return shape_err(format!("embedding {:?} vs confidence map {:?}", z.shape(), p.shape()));
    }
    let (c, n) = (z.shape()[0], p.numel());
    let num = z.reshape(&[c, n])?.matmul(&p.reshape(&[n, 1])?)?.reshape(&[c])?;
    num.div(&p.sum().add_scalar(eps1))
}

/// Cosine similarity with `ε₁` in the denominator, and `1 − s_vl`.
pub fn semantic_uncertainty<T: Scalar>(a: &[T], b: &[T], eps1: f64) -> Result<(T, T)> {
    if a.len() != b.len() {
        return shape_err(format!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let s = dot / (na * nb + T::lit(eps1));
    Ok((s, T::one() - s))
}

/// `1 − (2·Σ P·Y + ε_d) / (Σ P + Σ Y + ε_d)`, differentiable in `p`.
pub fn soft_dice_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, eps_dice: f64) -> Result<Tensor<T>> {
    if p.shape() != y.shape() {
        return shape_err(format!("dice of {:?} and {:?}", p.shape(), y.shape()));
    }
    let inter = p.mul(y)?.sum().mul_scalar(2.0).add_scalar(eps_dice);
    let total = p.sum().add(&y.sum())?.add_scalar(eps_dice);
    Ok(inter.div(&total)?.rsub_scalar(1.0))
}

pub fn joint_uncertainty(u_vl: f64, l_dice: f64, hyper: &UncertaintyHyper) -> f64 {
    hyper.beta_vl * u_vl + l_dice
}

pub fn sample_weight(u: f64, hyper: &UncertaintyHyper) -> f64 {
    (hyper.lambda_u * u).exp()
}

/// `u_vl` for a forward pass: `z_img` (`C×h×w`) is upsampled bilinearly to
/// the resolution of `p` before pooling. Computed outside the graph.
pub fn inference_uncertainty<T: Scalar>(z_img: &Tensor<T>, p: &Tensor<T>, z_bar: &Tensor<T>, eps1: f64) -> Result<(f64, f64)> {
    let (h, w) = match p.shape() {
        [h, w] => (*h, *w),
        s => return shape_err(format!("confidence map must be H×W, got {s:?}")),
    };
    let up = z_img.detach().bilinear_upsample((h, w))?;
    let g = masked_global_embedding(&up, &p.detach(), eps1)?;
    let (s, u) = semantic_uncertainty(g.data(), z_bar.data(), eps1)?;
    Ok((s.to_f64_lossy(), u.to_f64_lossy()))
}

/// Full per-sample record given the ground truth `y`.
pub fn uncertainty_record<T: Scalar>(
    z_img: &Tensor<T>,
    p: &Tensor<T>,
    z_bar: &Tensor<T>,
    y: &Tensor<T>,
    hyper: &UncertaintyHyper,
) -> Result<UncertaintyRecord> {
    let (s_vl, u_vl) = inference_uncertainty(z_img, p, z_bar, hyper.eps1)?;
    let l_dice = soft_dice_loss(&p.detach(), y, hyper.eps_dice)?.item()?.to_f64_lossy();
    let u = joint_uncertainty(u_vl, l_dice, hyper);
    Ok(UncertaintyRecord { s_vl, u_vl, l_dice, u, w: sample_weight(u, hyper) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn masked_embedding_examples() {
        let z = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let g = masked_global_embedding(&z, &t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]), 1e-6).unwrap();
        assert_abs_diff_eq!(g.data()[0], 5.0 / (2.0 + 1e-6), epsilon = 1e-15);
        let zero = masked_global_embedding(&z, &Tensor::zeros(&[2, 2]), 1e-6).unwrap();
        assert_eq!(zero.data(), &[0.0]);
        let ones = masked_global_embedding(&z, &Tensor::ones(&[2, 2]), 1e-6).unwrap();
        assert_abs_diff_eq!(ones.data()[0], 2.5, epsilon = 2.5 * 1e-6 / 4.0);
        assert!(matches!(masked_global_embedding(&z, &Tensor::ones(&[2, 3]), 1e-6), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn cosine_examples() {
        let (s, u) = semantic_uncertainty(&[1.0, 2.0], &[1.0, 2.0], 1e-6).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(u, 0.0, epsilon = 1e-6);
        assert_eq!(semantic_uncertainty(&[1.0, 0.0], &[0.0, 3.0], 1e-6).unwrap(), (0.0, 1.0));
        let (s, u) = semantic_uncertainty(&[1.0, -2.0], &[-2.0, 4.0], 1e-6).unwrap();
        assert_abs_diff_eq!(s, -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(u, 2.0, epsilon = 1e-6);
        assert_eq!(semantic_uncertainty(&[0.0, 0.0], &[1.0, 1.0], 1e-6).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn dice_examples() {
        let y = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let same = soft_dice_loss(&y, &y, 1e-6).unwrap().item().unwrap();
        assert!(same.abs() <= 1e-6 / 4.0);
        let disjoint = soft_dice_loss(&t(&[0.0, 1.0, 1.0, 0.0], &[2, 2]), &y, 1e-6).unwrap().item().unwrap();
        assert_abs_diff_eq!(disjoint, 1.0, epsilon = 1e-6);
        let l = soft_dice_loss(&t(&[1.0, 1.0, 0.0, 0.0], &[2, 2]), &t(&[1.0, 0.0, 0.0, 0.0], &[2, 2]), 1e-15)
            .unwrap()
            .item()
            .unwrap();
        assert_abs_diff_eq!(l, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn joint_and_weight_examples() {
        let h = UncertaintyHyper::default();
        assert_eq!(joint_uncertainty(0.0, 0.0, &h), 0.0);
        assert_abs_diff_eq!(joint_uncertainty(0.4, 0.2, &h), 0.4, epsilon = 1e-15);
        assert_eq!(joint_uncertainty(2.0, 1.0, &h), 2.0);
        assert_eq!(sample_weight(0.0, &h), 1.0);
        assert_abs_diff_eq!(sample_weight(0.4, &h), 1.4918, epsilon = 1e-4);
        assert_abs_diff_eq!(sample_weight(2.0, &h), 7.3891, epsilon = 1e-4);
    }

    #[test]
    fn hyper_validation() {
        assert!(UncertaintyHyper::default().validate().is_ok());
        assert!(UncertaintyHyper { eps1: 0.0, ..Default::default() }.validate().is_err());
        assert!(UncertaintyHyper { beta_vl: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn weight_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let h = UncertaintyHyper::default();
            prop_assume!(a < b);
            prop_assert!(sample_weight(a, &h) < sample_weight(b, &h));
            prop_assert!(joint_uncertainty(a, 0.3, &h) < joint_uncertainty(b, 0.3, &h));
            prop_assert!(joint_uncertainty(0.3, a, &h) < joint_uncertainty(0.3, b, &h));
        }

        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            c in 0.1f64..10.0,
            big in 100.0f64..1000.0,
        ) {
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(na > 0.5 && nb > 0.5);
            let (s, _) = semantic_uncertainty(&a, &b, 1e-6).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let (s2, _) = semantic_uncertainty(&scaled, &b, 1e-6).unwrap();
            // exact drift from ε₁: s·ε₁·|1 − 1/c| / (‖a‖‖b‖ + ε₁/c)
            let drift = s.abs() * 1e-6 * (1.0 - 1.0 / c).abs() / (na * nb);
            prop_assert!((s - s2).abs() <= drift * (1.0 + 1e-6) + 1e-15);

            // at embedding norms of order 10² the drift is below 1e-9
            let a_big: Vec<f64> = a.iter().map(|x| x * big / na).collect();
            let b_big: Vec<f64> = b.iter().map(|x| x * big / nb).collect();
            let (s3, _) = semantic_uncertainty(&a_big, &b_big, 1e-6).unwrap();
            let a_scaled: Vec<f64> = a_big.iter().map(|x| x * c).collect();
            let (s4, _) = semantic_uncertainty(&a_scaled, &b_big, 1e-6).unwrap();
            prop_assert!((s3 - s4).abs() < 1e-9);
        }

        #[test]
        fn embedding_is_convex_combination(
            z in proptest::collection::vec(-5.0f64..5.0, 2 * 9),
            p in proptest::collection::vec(0.0f64..1.0, 9),
        ) {
            prop_assume!(p.iter().sum::<f64>() >= 1.0);
            let g = masked_global_embedding(&t(&z, &[2, 3, 3]), &t(&p, &[3, 3]), 1e-6).unwrap();
            for c in 0..2 {
                let ch = &z[c * 9..(c + 1) * 9];
                let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = g.data()[c];
                // the ε₁ in the denominator shrinks slightly towards zero
                prop_assert!(v >= lo.min(0.0) - 1e-9 && v <= hi.max(0.0) + 1e-9);
                prop_assert!(v >= lo - 1e-5 * lo.abs() && v <= hi + 1e-5 * hi.abs());
            }
        }
    }
}
