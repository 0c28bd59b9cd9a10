//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the kernel machinery is generic over (`f32` or `f64`).
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite scalar converts to f64")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Bit pattern widened to 64 bits; used as an exact hashing key.
    fn key_bits(self) -> u64;

    fn machine_epsilon() -> Self;
}

impl Scalar for f64 {
    fn key_bits(self) -> u64 {
        self.to_bits()
    }

    fn machine_epsilon() -> Self {
        f64::EPSILON
    }
}

impl Scalar for f32 {
    fn key_bits(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn machine_epsilon() -> Self {
        f32::EPSILON
    }
}
