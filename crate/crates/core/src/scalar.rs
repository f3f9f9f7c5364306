//! Floating-point scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point type the estimators and numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`; the pipeline default is [`crate::Real`].
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
    /// Shorthand for converting an `f64` constant into this scalar type.
    fn of(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts to every Scalar")
    }

    /// Lossy view of this value as `f64` (exact for `f64`, widened for `f32`).
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }

    fn of_usize(n: usize) -> Self {
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
        assert_eq!(f64::of(1.5), 1.5);
        assert_eq!(f32::of(1.5), 1.5f32);
        assert_eq!(f64::of_usize(42), 42.0);
        assert_eq!(1.25f64.as_f64(), 1.25);
        assert_eq!(1.25f32.as_f64(), 1.25);
    }
}
