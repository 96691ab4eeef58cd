//! Exponent compression.
//!
//! Two schemes are provided:
//!
//! * **Unary** (lossless). Exponents are ranked by frequency and rank `r`
//!   is written as `r` zeros followed by a one, so `1`, `01`, `001`, ...
//!   Every codeword ends in a `1`, which makes boundaries visible without a
//!   table walk and is what the parallel decoder in [`crate::decoder_sim`]
//!   exploits.
//! * **MX** (lossy). A block of up to [`MX_BLOCK_SIZE`] elements shares the
//!   largest exponent; each element keeps an 8-bit fixed-point significand
//!   shifted right by its exponent gap, truncating toward zero.

use crate::bf16::{Bf16, MANTISSA_MASK};
pub use crate::bitstream::Bitstream;
use crate::error::{Error, Result};

pub const MX_BLOCK_SIZE: usize = 32;

/// Frequency-ranked mapping between 8-bit exponents and unary ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnaryCodebook {
    ranked: Vec<u8>,
    rank_of: [Option<u8>; 256],
}

impl UnaryCodebook {
    /// Rank symbols by descending count, ascending symbol value on ties.
    pub fn build(exponents: &[u8]) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::EmptyInput("exponent sequence"));
        }
        let counts = histogram(exponents);
        let mut ranked: Vec<u8> = (0..=255u8).filter(|&e| counts[e as usize] > 0).collect();
        // stable sort keeps ascending symbol order within equal counts
        ranked.sort_by(|a, b| counts[*b as usize].cmp(&counts[*a as usize]));
        Self::from_ranked(ranked)
    }

    /// Rebuild from a stored rank order, e.g. a container header.
    pub fn from_ranked(ranked: Vec<u8>) -> Result<Self> {
        if ranked.is_empty() {
            return Err(Error::EmptyInput("codebook"));
        }
        let mut rank_of = [None; 256];
        for (r, &sym) in ranked.iter().enumerate() {
            if rank_of[sym as usize].is_some() {
                return Err(Error::Corrupt(format!("duplicate codebook symbol {sym}")));
            }
            rank_of[sym as usize] = Some(r as u8);
        }
        Ok(UnaryCodebook { ranked, rank_of })
    }

    pub fn ranked_symbols(&self) -> &[u8] {
        &self.ranked
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    #[inline]
    pub fn rank_of(&self, symbol: u8) -> Option<usize> {
        self.rank_of[symbol as usize].map(usize::from)
    }

    #[inline]
    pub fn symbol(&self, rank: usize) -> Result<u8> {
        self.ranked.get(rank).copied().ok_or(Error::InvalidCodeword {
            rank,
            len: self.ranked.len(),
        })
    }

    /// Codeword length in bits for `symbol`.
    pub fn code_len(&self, symbol: u8) -> Result<usize> {
        self.rank_of(symbol).map(|r| r + 1).ok_or(Error::UnknownSymbol(symbol))
    }
}

fn histogram(symbols: &[u8]) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for &s in symbols {
        counts[s as usize] += 1;
    }
    counts
}

pub fn unary_encode_into(exponents: &[u8], codebook: &UnaryCodebook, out: &mut Bitstream) -> Result<()> {
    for &e in exponents {
        let rank = codebook.rank_of(e).ok_or(Error::UnknownSymbol(e))?;
        out.push_zeros(rank);
        out.push_bit(true);
    }
    Ok(())
}

pub fn unary_encode(exponents: &[u8], codebook: &UnaryCodebook) -> Result<Bitstream> {
    let mut out = Bitstream::new();
    unary_encode_into(exponents, codebook, &mut out)?;
    Ok(out)
}

/// Reference bit-serial decoder: reads exactly `count` codewords.
pub fn unary_decode_sequential(bits: &Bitstream, codebook: &UnaryCodebook, count: usize) -> Result<Vec<u8>> {
    let (out, _) = unary_decode_prefix(bits, codebook, count)?;
    Ok(out)
}

/// Like [`unary_decode_sequential`], also returning the number of bits used.
pub fn unary_decode_prefix(bits: &Bitstream, codebook: &UnaryCodebook, count: usize) -> Result<(Vec<u8>, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut reader = bits.reader();
    let mut zeros = 0usize;
    while out.len() < count {
        match reader.read_bit() {
            Some(false) => zeros += 1,
            Some(true) => {
                out.push(codebook.symbol(zeros)?);
                zeros = 0;
            }
            None => {
                return Err(Error::TruncatedStream {
                    decoded: out.len(),
                    expected: count,
                })
            }
        }
    }
    Ok((out, reader.position()))
}

/// Empirical Shannon entropy in bits per symbol. Empty input yields 0.
pub fn shannon_entropy(exponents: &[u8]) -> f64 {
    if exponents.is_empty() {
        return 0.0;
    }
    let n = exponents.len() as f64;
    histogram(exponents)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean unary codeword length in bits per symbol.
pub fn avg_unary_bits(exponents: &[u8], codebook: &UnaryCodebook) -> Result<f64> {
    if exponents.is_empty() {
        return Err(Error::EmptyInput("exponent sequence"));
    }
    let total = exponents.iter().try_fold(0usize, |acc, &e| codebook.code_len(e).map(|l| acc + l))?;
    Ok(total as f64 / exponents.len() as f64)
}

/// One MX element: sign plus an 8-bit significand (1 integer bit, 7
/// fraction bits) right-shifted by the gap to the shared exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MxElement {
    pub sign: bool,
    pub shifted_mantissa: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MxBlock {
    pub shared_exponent: u8,
    pub elements: Vec<MxElement>,
}

/// Shared exponent of a block: the largest exponent among non-zero
/// elements, or 0 when every element is zero.
pub fn mx_shared_exponent(values: &[Bf16]) -> u8 {
    values
        .iter()
        .map(|v| v.flush_denormal())
        .filter(|v| !v.is_zero())
        .map(Bf16::exponent)
        .max()
        .unwrap_or(0)
}

/// Encode one element against a given shared exponent.
#[inline]
pub fn mx_encode_element(value: Bf16, shared_exponent: u8) -> MxElement {
    let value = value.flush_denormal();
    let (sign, exponent, mantissa) = value.decompose();
    if value.is_zero() {
        return MxElement {
            sign,
            shifted_mantissa: 0,
        };
    }
    debug_assert!(exponent <= shared_exponent);
    let shift = (shared_exponent - exponent) as u32;
    let significand = 0x80 | mantissa;
    MxElement {
        sign,
        shifted_mantissa: significand.checked_shr(shift).unwrap_or(0),
    }
}

pub fn mx_encode_block(values: &[Bf16]) -> Result<MxBlock> {
    if values.len() > MX_BLOCK_SIZE {
        return Err(Error::InvalidParameter(format!(
            "MX block of {} elements exceeds {MX_BLOCK_SIZE}",
            values.len()
        )));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let shared_exponent = mx_shared_exponent(values);
    Ok(MxBlock {
        shared_exponent,
        elements: values.iter().map(|&v| mx_encode_element(v, shared_exponent)).collect(),
    })
}

/// Result of renormalizing one MX element back to BF16.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MxDecoded {
    pub value: Bf16,
    /// The renormalized exponent fell below 1 and the value was clamped to
    /// a signed zero.
    pub underflow: bool,
}

pub fn mx_decode_element(shared_exponent: u8, sign: bool, shifted_mantissa: u8) -> MxDecoded {
    let signed_zero = Bf16::compose(sign, 0, 0);
    if shifted_mantissa == 0 {
        return MxDecoded {
            value: signed_zero,
            underflow: false,
        };
    }
    let z = shifted_mantissa.leading_zeros() as u8;
    if shared_exponent <= z {
        return MxDecoded {
            value: signed_zero,
            underflow: true,
        };
    }
    MxDecoded {
        value: Bf16::compose(sign, shared_exponent - z, (shifted_mantissa << z) & MANTISSA_MASK),
        underflow: false,
    }
}

impl MxBlock {
    pub fn decode(&self) -> Vec<Bf16> {
        self.elements
            .iter()
            .map(|e| mx_decode_element(self.shared_exponent, e.sign, e.shifted_mantissa).value)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bf(x: f32) -> Bf16 {
        Bf16::from_f32(x).unwrap()
    }

    #[test]
    fn codebook_examples() {
        let cb = UnaryCodebook::build(&[126, 126, 126, 127, 127, 125]).unwrap();
        assert_eq!(cb.ranked_symbols(), &[126, 127, 125]);
        assert_eq!(UnaryCodebook::build(&[9, 9, 9]).unwrap().ranked_symbols(), &[9]);
        assert_eq!(UnaryCodebook::build(&[20, 10]).unwrap().ranked_symbols(), &[10, 20]);
        assert!(UnaryCodebook::build(&[]).is_err());
        assert!(UnaryCodebook::from_ranked(vec![3, 4, 3]).is_err());
    }

    #[test]
    fn unary_codewords() {
        let cb = UnaryCodebook::from_ranked(vec![10, 11, 12]).unwrap();
        assert_eq!(unary_encode(&[10], &cb).unwrap(), Bitstream::from_bit_str("1"));
        assert_eq!(unary_encode(&[11], &cb).unwrap(), Bitstream::from_bit_str("01"));
        assert_eq!(unary_encode(&[12], &cb).unwrap(), Bitstream::from_bit_str("001"));
        assert_eq!(unary_encode(&[10, 10, 10], &cb).unwrap(), Bitstream::from_bit_str("111"));
        let s = unary_encode(&[12, 10, 11], &cb).unwrap();
        assert_eq!(s, Bitstream::from_bit_str("001101"));
        assert_eq!(s.as_bytes(), &[0b0011_0100]);
        assert_eq!(unary_encode(&[99], &cb), Err(Error::UnknownSymbol(99)));
    }

    #[test]
    fn sequential_decode_examples() {
        let cb = UnaryCodebook::from_ranked(vec![10, 11, 12]).unwrap();
        let s = Bitstream::from_bit_str("001101");
        assert_eq!(unary_decode_sequential(&s, &cb, 3).unwrap(), vec![12, 10, 11]);
        assert_eq!(unary_decode_sequential(&Bitstream::from_bit_str("1"), &cb, 1).unwrap(), vec![10]);
        assert_eq!(
            unary_decode_sequential(&Bitstream::from_bit_str("00"), &cb, 1),
            Err(Error::TruncatedStream { decoded: 0, expected: 1 })
        );
        assert_eq!(
            unary_decode_sequential(&Bitstream::from_bit_str("0001"), &cb, 1),
            Err(Error::InvalidCodeword { rank: 3, len: 3 })
        );
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[1, 2, 3, 4]) - 2.0).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[7, 7, 7]), 0.0);
        assert!((shannon_entropy(&[1, 1, 2, 3]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn avg_bits_examples() {
        let cb = UnaryCodebook::build(&[5, 5]).unwrap();
        assert_eq!(avg_unary_bits(&[5, 5, 5], &cb).unwrap(), 1.0);
        let data = [1, 1, 2, 3];
        let cb = UnaryCodebook::build(&data).unwrap();
        assert_eq!(avg_unary_bits(&data, &cb).unwrap(), 1.75);
        assert!(avg_unary_bits(&data, &cb).unwrap() >= shannon_entropy(&data));
    }

    #[test]
    fn mx_encode_examples() {
        let ones = mx_encode_block(&[Bf16::ONE; 4]).unwrap();
        assert_eq!(ones.shared_exponent, 127);
        assert!(ones.elements.iter().all(|e| e.shifted_mantissa == 0b1000_0000));

        let b = mx_encode_block(&[bf(2.0), bf(1.0)]).unwrap();
        assert_eq!(b.shared_exponent, 128);
        assert_eq!(b.elements[0].shifted_mantissa, 0b1000_0000);
        assert_eq!(b.elements[1].shifted_mantissa, 0b0100_0000);

        let tiny = bf(2f32.powi(-9) * 1.5);
        let b = mx_encode_block(&[Bf16::ONE, tiny]).unwrap();
        assert_eq!(b.elements[1].shifted_mantissa, 0);

        assert_eq!(mx_encode_block(&[Bf16::ZERO; 3]).unwrap().shared_exponent, 0);
        assert_eq!(mx_encode_block(&[Bf16::ONE, Bf16::from_bits(0x7F80)]), Err(Error::NonFinite { index: 1 }));
        assert!(mx_encode_block(&[Bf16::ONE; 33]).is_err());
    }

    #[test]
    fn mx_decode_examples() {
        assert_eq!(mx_decode_element(127, false, 0b1000_0000).value, Bf16::ONE);
        assert_eq!(mx_decode_element(128, false, 0b0100_0000).value, Bf16::ONE);
        assert_eq!(mx_decode_element(90, true, 0).value, Bf16::NEG_ZERO);
        assert_eq!(mx_decode_element(90, false, 0).value, Bf16::ZERO);
        let d = mx_decode_element(1, true, 0b0010_0000);
        assert!(d.underflow);
        assert_eq!(d.value, Bf16::NEG_ZERO);
    }

    fn finite_normal() -> impl Strategy<Value = Bf16> {
        (any::<bool>(), 1u8..=254, 0u8..128).prop_map(|(s, e, m)| Bf16::compose(s, e, m))
    }

    proptest! {
        #[test]
        fn unary_round_trip(data in proptest::collection::vec(0u8..=255, 1..300)) {
            let cb = UnaryCodebook::build(&data).unwrap();
            let bits = unary_encode(&data, &cb).unwrap();
            prop_assert_eq!(unary_decode_sequential(&bits, &cb, data.len()).unwrap(), data);
        }

        #[test]
        fn unary_bits_bound_entropy(data in proptest::collection::vec(prop_oneof![120u8..130, 0u8..=255], 1..500)) {
            let cb = UnaryCodebook::build(&data).unwrap();
            prop_assert!(avg_unary_bits(&data, &cb).unwrap() + 1e-12 >= shannon_entropy(&data));
        }

        #[test]
        fn codebook_is_order_independent(mut data in proptest::collection::vec(0u8..20, 1..100), seed in any::<u64>()) {
            let cb = UnaryCodebook::build(&data).unwrap();
            // deterministic shuffle
            let mut s = seed | 1;
            for i in (1..data.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                data.swap(i, (s % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(UnaryCodebook::build(&data).unwrap(), cb);
        }

        #[test]
        fn mx_exact_for_uniform_exponent(e in 1u8..=254, parts in proptest::collection::vec((any::<bool>(), 0u8..128), 1..=32)) {
            let vals: Vec<Bf16> = parts.iter().map(|&(s, m)| Bf16::compose(s, e, m)).collect();
            prop_assert_eq!(mx_encode_block(&vals).unwrap().decode(), vals);
        }

        #[test]
        fn mx_error_bound(vals in proptest::collection::vec(finite_normal(), 1..=32)) {
            let block = mx_encode_block(&vals).unwrap();
            for (v, d) in vals.iter().zip(block.decode()) {
                let gap = (block.shared_exponent - v.exponent()) as i32;
                let err = (d.to_f32() as f64 - v.to_f32() as f64).abs();
                let bound = (2f64.powi(gap) - 1.0) * 2f64.powi(v.exponent() as i32 - 127 - 7);
                prop_assert!(err <= bound, "err {} bound {}", err, bound);
                prop_assert!(d.to_f32().abs() <= v.to_f32().abs());
                prop_assert!(d.is_zero() || d.sign() == v.sign());
            }
        }
    }
}
