//! Scalar abstraction: every numeric module is generic over `Real`,
//! implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the core math is generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Round-trip through `f32`. Persisted payloads are 32-bit floats;
    /// snapping values at creation time makes save/load bit-exact.
    fn snap_f32(self) -> Self;
}

impl Real for f32 {
    fn snap_f32(self) -> Self {
        self
    }
}

impl Real for f64 {
    fn snap_f32(self) -> Self {
        self as f32 as f64
    }
}

/// Shorthand conversion from an `f64` literal or intermediate.
#[inline]
pub fn real<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("f64 convertible to scalar")
}
