//! Scalar abstraction shared by the analytical models, statistics and the
//! dense networks.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// Converts an `f64` literal. Every `f64` is representable (with
    /// rounding) in both supported types, so this never fails.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Converts a count.
    #[inline]
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Relative difference `|a - b| / max(|a|, |b|, tiny)`.
pub fn rel_diff<T: Scalar>(a: T, b: T) -> T {
    let scale = a.abs().max(b.abs()).max(T::min_positive_value());
    (a - b).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        assert!((Scalar::erf(0.0f64)).abs() < 1e-15);
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-14);
        assert!((Scalar::erf(1.0f32) - 0.842_700_8).abs() < 1e-6);
    }

    #[test]
    fn rel_diff_symmetric() {
        assert_eq!(rel_diff(2.0, 1.0), rel_diff(1.0, 2.0));
        assert_eq!(rel_diff(0.0f64, 0.0), 0.0);
    }
}
