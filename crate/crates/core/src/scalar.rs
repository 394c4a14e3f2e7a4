//! Scalar abstraction for the math core.
//!
//! Kernel construction and the convolution engine are generic over [`Scalar`]
//! so they can run in `f32` or `f64`. Training and gradient checking always
//! use `f64`; the 32-bit instantiation exists for inference-style workloads.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating-point scalar usable by the math core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant. Panics only on types that cannot represent
    /// ordinary finite constants, which `f32`/`f64` always can.
    #[inline]
    fn from_f64_const(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 constant must convert")
    }

    /// Converts a `usize` index into the scalar domain.
    #[inline]
    fn from_index(i: usize) -> Self {
        <Self as FromPrimitive>::from_usize(i).expect("index must convert")
    }

    /// Lossy view as `f64`, used for reporting only.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
