//! Scalar abstraction so the numeric core runs on `f32` or `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumCast};

/// Floating-point scalar used by the numeric core.
///
/// `of` converts an `f64` literal; it is the only extension over
/// [`num_traits::Float`] the crate needs.
pub trait Scalar: Float + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("literal representable in scalar type")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar convertible to f64")
    }

    fn from_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of(0.5), 0.5);
        assert_eq!(f32::of(0.5), 0.5f32);
        assert_eq!(f64::from_usize(7), 7.0);
        assert_eq!(0.25f32.to_f64(), 0.25);
    }
}
