//! Independent oracles and conformance helpers for `dcls-core`.
//!
//! Everything here exists to check the production code from the outside:
//! a four-corner bilinear constructor, a direct-sum convolution, central
//! finite differences, gradcheck sweeps, and golden-vector verification.
//! Oracles deliberately share no code with the paths they validate.

pub mod bilinear_oracle;
pub mod fd;
pub mod golden;
pub mod gradcheck;
pub mod naive_conv;

pub use bilinear_oracle::bilinear_oracle;
pub use fd::{fd_grad, relative_error, FD_STEP};
pub use golden::{golden_roundtrip, read_golden, write_golden, GoldenReport};
pub use gradcheck::{
    gradcheck_kernel, gradcheck_kernel_with, gradcheck_layer, GradCheckReport,
    KernelCheckConfig, LayerCheckConfig,
};
pub use naive_conv::naive_conv_forward;
