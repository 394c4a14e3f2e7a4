//! Differentiable dilated convolution with learnable spacings.
//!
//! A dense convolution kernel is assembled from a small set of elements whose
//! grid positions and interpolation widths are themselves trainable. The
//! crate provides the kernel constructor with exact gradients, a grouped N-D
//! convolution engine, a compact training stack (initialization, parameter
//! groups, optimizers, cross-layer position sharing), and dataset utilities.
//!
//! The math core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the 64-bit instantiation used by training and gradient checks.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod interp;
pub mod kernelgen;
pub mod nn;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{DclsError, Result};
pub use scalar::Scalar;

/// 64-bit tensor, the default for training and gradient checking.
pub type Tensor64 = tensor::TensorND<f64>;
/// 32-bit tensor for inference-style convolution workloads.
pub type Tensor32 = tensor::TensorND<f32>;
/// 64-bit learnable kernel parameters.
pub type Params64 = kernelgen::DclsParams<f64>;
/// 64-bit parameter gradients.
pub type Gradients64 = kernelgen::DclsGradients<f64>;
/// 64-bit constructed kernel.
pub type Kernel64 = kernelgen::ConstructedKernel<f64>;
