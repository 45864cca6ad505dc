//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// The engine runs in `f64` by default (see the aliases at the crate root);
/// `f32` is supported for callers that only need forward evaluation.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossy conversion from a literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal fits every float type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Smallest variance used when normalizing, so a constant channel never divides by zero.
    fn variance_floor() -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn variance_floor() -> Self {
        1e-12
    }
}

impl Scalar for f64 {
    #[inline]
    fn variance_floor() -> Self {
        1e-24
    }
}
