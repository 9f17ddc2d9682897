//! Scalar abstraction for the numeric core.
//!
//! Kernels are written once against [`Scalar`] and instantiated at `f32`
//! for the product path and at `f64` for high-precision oracles such as
//! finite-difference gradient checks.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of tensors and parameters.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Copy + 'static
{
    /// Lossless-enough conversion from `f64` constants (rounds at `f32`).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Widening conversion used when accumulating diagnostics.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
