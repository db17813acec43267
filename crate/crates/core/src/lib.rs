//! Desk-scale workbench for uncertainty-weighted, human-in-the-loop
//! promptable segmentation under synthetic dataset bias.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pick the usual precision for each job: 64-bit for
//! gradient checks, 32-bit for training and serving.

pub mod error;
pub mod eval;
pub mod data;
pub mod gradcheck;
pub mod hitl;
pub mod model;
mod scalar;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ElemOp, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
