use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};

/// Floating point element type of tensors, models and training: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn count(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
