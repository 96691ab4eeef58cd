//! MSB-first bit streams.
//!
//! Bit `i` of a stream lives in byte `i / 8` at bit position `7 - i % 8`.
//! Trailing pad bits in the final byte are always zero.

use crate::error::{Error, Result};

#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Bitstream {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl std::fmt::Debug for Bitstream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bitstream({} bits: ", self.bit_len)?;
        for i in 0..self.bit_len.min(64) {
            write!(f, "{}", self.get(i) as u8)?;
        }
        if self.bit_len > 64 {
            write!(f, "...")?;
        }
        write!(f, ")")
    }
}

impl Bitstream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Bitstream {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            bit_len: 0,
        }
    }

    /// Wrap raw bytes holding `bit_len` bits. Rejects short buffers, extra
    /// whole bytes and non-zero pad bits.
    pub fn from_bytes(bytes: Vec<u8>, bit_len: usize) -> Result<Self> {
        if bytes.len() != bit_len.div_ceil(8) {
            return Err(Error::Corrupt(format!(
                "{} bytes cannot hold exactly {} bits",
                bytes.len(),
                bit_len
            )));
        }
        let pad = bytes.len() * 8 - bit_len;
        if pad > 0 && bytes[bytes.len() - 1] & ((1u8 << pad) - 1) != 0 {
            return Err(Error::Corrupt("non-zero pad bits".into()));
        }
        Ok(Bitstream { bytes, bit_len })
    }

    /// Parse a string of `0`/`1` characters; other characters are skipped.
    pub fn from_bit_str(s: &str) -> Self {
        let mut out = Bitstream::new();
        for c in s.chars() {
            match c {
                '0' => out.push_bit(false),
                '1' => out.push_bit(true),
                _ => {}
            }
        }
        out
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bit_len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bit_len == 0
    }

    #[inline]
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }

    #[inline]
    pub fn push_bit(&mut self, bit: bool) {
        let offset = self.bit_len % 8;
        if offset == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> offset;
        }
        self.bit_len += 1;
    }

    /// Append the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value >> width == 0, "value wider than {width} bits");
        for i in (0..width).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn push_zeros(&mut self, count: usize) {
        for _ in 0..count {
            self.push_bit(false);
        }
    }

    pub fn extend_from(&mut self, other: &Bitstream) {
        for i in 0..other.len() {
            self.push_bit(other.get(i));
        }
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        assert!(index < self.bit_len, "bit {index} out of range {}", self.bit_len);
        self.bytes[index / 8] & (0x80 >> (index % 8)) != 0
    }

    /// Read `width` bits starting at `start` as an unsigned integer.
    pub fn get_bits(&self, start: usize, width: u32) -> u64 {
        (0..width as usize).fold(0u64, |acc, i| (acc << 1) | self.get(start + i) as u64)
    }

    pub fn count_ones(&self) -> usize {
        // pad bits are zero, so whole-byte popcount is exact
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.bit_len).map(move |i| self.get(i))
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader { stream: self, pos: 0 }
    }
}

impl FromIterator<bool> for Bitstream {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let mut out = Bitstream::new();
        for bit in iter {
            out.push_bit(bit);
        }
        out
    }
}

/// Sequential cursor over a [`Bitstream`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    stream: &'a Bitstream,
    pos: usize,
}

impl BitReader<'_> {
    #[inline]
    pub fn position(&self) -> usize {
        self.pos
    }

    #[inline]
    pub fn remaining(&self) -> usize {
        self.stream.len() - self.pos
    }

    #[inline]
    pub fn read_bit(&mut self) -> Option<bool> {
        if self.pos >= self.stream.len() {
            return None;
        }
        let bit = self.stream.get(self.pos);
        self.pos += 1;
        Some(bit)
    }

    pub fn read_bits(&mut self, width: u32) -> Option<u64> {
        if self.remaining() < width as usize {
            return None;
        }
        let v = self.stream.get_bits(self.pos, width);
        self.pos += width as usize;
        Some(v)
    }
}
