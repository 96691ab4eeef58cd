//! Bit-level BFloat16.
//!
//! Only the representation is modelled here: field access, composition and
//! rounding from `f32`. Arithmetic happens in `f32` after widening.

use std::fmt;

use crate::error::{Error, Result};

pub const EXPONENT_BIAS: u8 = 127;
pub const MANTISSA_BITS: u32 = 7;
pub const MANTISSA_MASK: u8 = 0x7F;
const EXPONENT_MAX: u8 = 0xFF;

/// A 16-bit brain floating point pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const NEG_ZERO: Bf16 = Bf16(0x8000);
    pub const ONE: Bf16 = Bf16(0x3F80);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Raw fields `(sign, exponent, mantissa)` with no value interpretation.
    #[inline]
    pub const fn decompose(self) -> (bool, u8, u8) {
        let sign = self.0 >> 15 == 1;
        let exponent = ((self.0 >> 7) & 0xFF) as u8;
        let mantissa = (self.0 & 0x7F) as u8;
        (sign, exponent, mantissa)
    }

    /// Inverse of [`Bf16::decompose`]. `mantissa` must fit in 7 bits.
    #[inline]
    pub fn compose(sign: bool, exponent: u8, mantissa: u8) -> Self {
        debug_assert!(mantissa <= MANTISSA_MASK, "mantissa {mantissa:#x} wider than 7 bits");
        Bf16(((sign as u16) << 15) | ((exponent as u16) << 7) | (mantissa & MANTISSA_MASK) as u16)
    }

    #[inline]
    pub const fn sign(self) -> bool {
        self.0 >> 15 == 1
    }

    #[inline]
    pub const fn exponent(self) -> u8 {
        ((self.0 >> 7) & 0xFF) as u8
    }

    #[inline]
    pub const fn mantissa(self) -> u8 {
        (self.0 & 0x7F) as u8
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        self.exponent() != EXPONENT_MAX
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 & 0x7FFF == 0
    }

    #[inline]
    pub const fn is_denormal(self) -> bool {
        self.exponent() == 0 && self.mantissa() != 0
    }

    /// Denormals become zero of the same sign; everything else is unchanged.
    #[inline]
    pub const fn flush_denormal(self) -> Self {
        if self.is_denormal() {
            Bf16(self.0 & 0x8000)
        } else {
            self
        }
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    /// Round-to-nearest-even from `f32`. Inputs that are not finite, or
    /// that overflow to infinity after rounding, are rejected.
    pub fn from_f32(x: f32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        let bits = x.to_bits();
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb) >> 16;
        let out = Bf16(rounded as u16);
        if !out.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(out)
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Bf16> for f32 {
    fn from(v: Bf16) -> f32 {
        v.to_f32()
    }
}

/// Round a slice of `f32` values, reporting the first non-finite index.
pub fn round_slice(values: &[f32]) -> Result<Vec<Bf16>> {
    values
        .iter()
        .enumerate()
        .map(|(index, &x)| Bf16::from_f32(x).map_err(|_| Error::NonFinite { index }))
        .collect()
}

pub fn widen_slice(values: &[Bf16]) -> Vec<f32> {
    values.iter().map(|v| v.to_f32()).collect()
}
