//! Scalar abstraction shared by every numeric module.
//!
//! All core math is generic over [`Scalar`], which bundles the linear-algebra
//! requirements of `nalgebra` with primitive casts and seeded sampling. `f32`
//! and `f64` are the two supported instantiations; the crate root exposes
//! `f64` type aliases for the common case.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::distr::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar usable throughout the crate.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + SampleUniform {
    /// Draws one standard-normal variate from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// True when the value is neither NaN nor infinite.
    fn is_finite_scalar(self) -> bool {
        self.to_f64().is_some_and(f64::is_finite)
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant not representable in scalar type")
}

/// Mixes a base seed with a stream index so independent sub-tasks (restarts,
/// chains, models) get decorrelated but reproducible generators.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
