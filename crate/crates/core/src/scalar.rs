//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar: `f32` or `f64`.
///
/// Beyond the arithmetic from [`Float`], a scalar knows how tightly a
/// probability vector has to sum to one at its precision and how to
/// (de)serialize itself into the little-endian weight blob.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Name written into model manifests.
    const NAME: &'static str;
    /// Width in bytes of one little-endian value in a weight blob.
    const BYTES: usize;

    /// Allowed deviation of a probability vector's sum from one.
    fn sum_tolerance() -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value; `bytes` must be exactly [`Self::BYTES`] long.
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossless for every literal this crate uses.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn sum_tolerance() -> Self {
        1e-9
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    // single precision cannot hold 1e-9; this is a few ulps over a
    // handful of labels
    fn sum_tolerance() -> Self {
        1e-5
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Ratio of two counts, `0` when the denominator is zero.
pub(crate) fn ratio<S: Scalar>(num: usize, den: usize) -> S {
    if den == 0 {
        S::zero()
    } else {
        S::from_count(num) / S::from_count(den)
    }
}
