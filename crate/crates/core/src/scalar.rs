//! Floating-point abstraction for the numeric kernels.
//!
//! The network engine, feature construction and the models are generic over
//! [`Scalar`] so the same code runs in working precision (`f32`) and in high
//! precision (`f64`) for finite-difference gradient checks. Random draws are
//! always generated in `f64` and converted with [`Scalar::of`], which keeps
//! sampling decisions identical across precisions.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by every numeric kernel in this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Convert from `f64`, rounding to the nearest representable value.
    fn of(v: f64) -> Self;

    /// Widen to `f64` exactly (`f32 -> f64` is lossless).
    fn wide(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(v: f64) -> f32 {
        v as f32
    }

    #[inline(always)]
    fn wide(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(v: f64) -> f64 {
        v
    }

    #[inline(always)]
    fn wide(self) -> f64 {
        self
    }
}
