//! Function-preserving rewrites for convolutional networks.
//!
//! The crate is organised around a small plain-data network description
//! ([`ir::NetworkSpec`]) plus a reference execution engine ([`engine`]) that
//! is deliberately simple: direct convolution loops with `f64` accumulation,
//! so every other module has a trustworthy ground truth to compare against.
//!
//! On top of those sit the rewrite passes:
//!
//! * [`morph::split_conv`] replaces one convolution with two stacked
//!   convolutions (plus identity BatchNorm/PReLU between them) whose
//!   composition reproduces the original kernel, found by alternating
//!   least squares ([`morph::solve_kernel_factorization`]).
//! * [`morph::promote_resolution`] doubles the declared input resolution
//!   while restructuring the stem so every layer from the first residual
//!   stage onward keeps its shapes and multiply-accumulate counts.
//!
//! [`verify`] checks the rewrites (value preservation on the
//! padding-free interior, shape tables, MAC tables), [`loss`] implements
//! inverse-frequency weighted cross-entropy for imbalanced classification,
//! and [`container`] stores parameter tensors in a small manifest + blob
//! binary format.
//!
//! All numeric kernels are generic over the scalar type through [`Scalar`]
//! (implemented for `f32` and `f64`); reductions always accumulate in `f64`
//! and round once at the end.

pub mod container;
pub mod engine;
mod error;
pub mod ir;
pub mod loss;
pub mod morph;
mod scalar;
pub mod templates;
mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Single-precision tensor (stored as `f32`, reductions still run in `f64`).
pub type TensorF32 = Tensor<f32>;
/// Double-precision tensor.
pub type TensorF64 = Tensor<f64>;

/// Single-precision parameter store.
pub type WeightsStoreF32 = container::WeightsStore<f32>;
/// Double-precision parameter store.
pub type WeightsStoreF64 = container::WeightsStore<f64>;
