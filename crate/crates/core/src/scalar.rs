//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar accepted by tensors, models and statistics: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Total for both supported widths.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite or infinite float converts")
    }

    /// Converts through `f32`, the on-disk scalar width.
    #[inline]
    fn from_disk(v: f32) -> Self {
        Self::lit(v as f64)
    }

    #[inline]
    fn to_disk(self) -> f32 {
        self.as_f64() as f32
    }

    #[inline]
    fn clamp_to(self, lo: Self, hi: Self) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_is_inclusive() {
        assert_eq!(2.5f64.clamp_to(0.0, 1.0), 1.0);
        assert_eq!((-0.5f32).clamp_to(0.0, 1.0), 0.0);
        assert_eq!(0.25f64.clamp_to(0.0, 1.0), 0.25);
    }

    #[test]
    fn f32_round_trip_is_exact_for_f32_values() {
        let v = 0.1f32;
        assert_eq!(f64::from_disk(v).to_disk(), v);
    }
}
