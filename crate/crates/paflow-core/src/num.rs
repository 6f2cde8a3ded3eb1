//! Scalar abstraction for the numeric core.
//!
//! Everything downstream is generic over [`Real`], so the same code runs in
//! f32 or f64. The shipped binaries and the test suites instantiate f64:
//! several invariants are checked at tolerances (1e-9 and below) that f32
//! cannot reach.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable throughout the crate: f32 or f64.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an f64 literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal converts to scalar")
    }

    /// Widen to f64 (exact for f32 and f64).
    fn to_f64x(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// Lossy conversion from a usize (grid sizes, node counts).
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize converts to scalar")
    }
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + LinalgScalar
        + ScalarOperand
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Draw a standard normal variate, widened from the f64 sampler so the
/// stream is identical for every scalar type under a fixed seed.
pub fn standard_normal<S: Real, R: rand::Rng + ?Sized>(rng: &mut R) -> S {
    S::of(rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Draw a Gumbel(0,1) variate via inverse transform on the open unit
/// interval (both endpoints excluded, so the double log is finite).
pub fn standard_gumbel<S: Real, R: rand::Rng + ?Sized>(rng: &mut R) -> S {
    let u: f64 = rng.sample(rand_distr::Open01);
    S::of(-(-u.ln()).ln())
}
