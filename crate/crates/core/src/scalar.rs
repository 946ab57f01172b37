//! Generic scalar abstraction: every numerical module in this crate is written
//! against [`Real`] so the same code runs in f32 (the pipeline default) and in
//! f64 (used by the finite-difference test suites, where f32 rounding would
//! drown the signal).

use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar: f32 or f64.
///
/// `nalgebra::RealField` supplies the transcendental functions without the
/// method-name collisions that `num_traits::Float` would introduce.
pub trait Real:
    nalgebra::RealField + Copy + Default + FloatConst + FromPrimitive + ToPrimitive
{
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar not convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal into the generic scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64_lit(x)
}
