use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Element type of a [`Tensor`](crate::Tensor). Implemented for `f32`
/// (training) and `f64` (gradient checks).
pub trait Scalar:
    Float + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossy conversion from a double literal.
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
