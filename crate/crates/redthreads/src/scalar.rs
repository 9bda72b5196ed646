//! Scalar payload abstraction.
//!
//! Compared outputs are built from scalars (or arrays of scalars). The runtime
//! is generic over the scalar type so the same comparison, voting and
//! bit-flip machinery works for 32/64-bit floats and for integer payloads.

use num_traits::ToPrimitive;
use std::fmt;

/// A value that can live in a compared output payload.
///
/// Provides a canonical bit representation (used by bitwise comparison and by
/// single-bit fault injection) and an absolute-difference metric (used by
/// tolerance-based comparison).
pub trait Scalar:
    Copy + PartialEq + Send + Sync + fmt::Debug + ToPrimitive + 'static
{
    /// Width of the payload in bits.
    const BITS: u32;

    /// Canonical bit pattern, zero-extended to 64 bits.
    fn to_bits_u64(self) -> u64;

    /// Inverse of [`Scalar::to_bits_u64`]; bits above `BITS` are ignored.
    fn from_bits_u64(bits: u64) -> Self;

    /// |self - other| as an f64. Exact for integer types; for floats this is
    /// the usual absolute difference (NaN when either operand is NaN).
    fn abs_diff_f64(self, other: Self) -> f64;

    /// Flips a single bit of the payload. `bit` must be `< BITS`.
    fn flip_bit(self, bit: u32) -> Self {
        debug_assert!(bit < Self::BITS);
        Self::from_bits_u64(self.to_bits_u64() ^ (1u64 << bit))
    }
}

macro_rules! impl_scalar_float {
    ($t:ty, $bits:expr, $raw:ty) => {
        impl Scalar for $t {
            const BITS: u32 = $bits;

            fn to_bits_u64(self) -> u64 {
                self.to_bits() as u64
            }

            fn from_bits_u64(bits: u64) -> Self {
                <$t>::from_bits(bits as $raw)
            }

            fn abs_diff_f64(self, other: Self) -> f64 {
                (self as f64 - other as f64).abs()
            }
        }
    };
}

macro_rules! impl_scalar_int {
    ($t:ty, $bits:expr, $unsigned:ty) => {
        impl Scalar for $t {
            const BITS: u32 = $bits;

            fn to_bits_u64(self) -> u64 {
                (self as $unsigned) as u64
            }

            fn from_bits_u64(bits: u64) -> Self {
                (bits as $unsigned) as $t
            }

            fn abs_diff_f64(self, other: Self) -> f64 {
                (self as i128 - other as i128).unsigned_abs() as f64
            }
        }
    };
}

impl_scalar_float!(f64, 64, u64);
impl_scalar_float!(f32, 32, u32);

impl_scalar_int!(i64, 64, u64);
impl_scalar_int!(u64, 64, u64);
impl_scalar_int!(i32, 32, u32);
impl_scalar_int!(u32, 32, u32);
impl_scalar_int!(i16, 16, u16);
impl_scalar_int!(u16, 16, u16);
impl_scalar_int!(i8, 8, u8);
impl_scalar_int!(u8, 8, u8);
