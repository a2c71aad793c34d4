//! Scalar abstraction: the whole stack is generic over the float width.
//!
//! `f32` is the training default; `f64` is used where tighter numeric
//! tolerances matter (gradient checking, oracle comparisons).

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable as tensor element. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Byte width of one value in checkpoint files.
    const BYTE_WIDTH: u8;

    /// Central-difference step used by the gradient checker.
    fn fd_epsilon() -> Self;

    /// Relative-error tolerance the gradient checker enforces by default.
    fn fd_tolerance() -> Self;

    /// Floor for the relative-error denominator; components whose analytic
    /// and numeric gradients both fall below this are compared absolutely.
    fn fd_floor() -> Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64_value(self) -> f64;

    /// Bit pattern, widened to u64, for bit-exact serialization.
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;
}

impl Scalar for f32 {
    const BYTE_WIDTH: u8 = 4;

    fn fd_epsilon() -> Self {
        5e-3
    }

    fn fd_tolerance() -> Self {
        1e-3
    }

    fn fd_floor() -> Self {
        1e-1
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64_value(self) -> f64 {
        self as f64
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }

    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
}

impl Scalar for f64 {
    const BYTE_WIDTH: u8 = 8;

    fn fd_epsilon() -> Self {
        1e-4
    }

    fn fd_tolerance() -> Self {
        1e-5
    }

    fn fd_floor() -> Self {
        1e-3
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64_value(self) -> f64 {
        self
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_round_trip_is_exact() {
        for &x in &[0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, -3.25e-12] {
            assert_eq!(f32::from_bits_u64(x.to_bits_u64()).to_bits(), x.to_bits());
        }
        for &x in &[0.0f64, -0.0, 1.5, f64::MIN_POSITIVE, 2.2e300] {
            assert_eq!(f64::from_bits_u64(x.to_bits_u64()).to_bits(), x.to_bits());
        }
    }
}
