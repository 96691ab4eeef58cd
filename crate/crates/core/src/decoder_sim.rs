//! Functional model of the hardware decoder.
//!
//! The unary exponent stream is cut into 8-bit chunks. Each chunk goes
//! through a parallel zero counter independently of its neighbours; a
//! reorganization pass then carries the trailing zero run of each chunk
//! into the first codeword of the next chunk that contains a terminator,
//! and the resulting ranks index the codebook LUT. The MX path reuses the
//! zero counter on a single mantissa to find the renormalization shift.
//!
//! [`StreamingDecoder`] consumes typed 128-byte cache blocks strictly in
//! arrival order, keeping one leftover buffer per stream type.

use std::collections::VecDeque;

use crate::bf16::{Bf16, MANTISSA_MASK};
use crate::bitstream::Bitstream;
use crate::container::{ExponentMode, StreamKind, TensorHeader, View};
use crate::error::{Error, Result};
use crate::expcodec::UnaryCodebook;
use crate::superblock::{CacheBlock, PackedTensor, CACHE_BLOCK_BYTES};

/// Output of the zero counter for one 8-bit chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkResult {
    runs: [u8; 8],
    /// Number of `1` bits, which is also the number of valid `runs`.
    pub num_ones: u8,
    /// The chunk's final (least significant) bit.
    pub last_bit: bool,
    /// Zeros after the last `1`; carried into the next chunk.
    pub trailing_zeros: u8,
}

impl ChunkResult {
    /// Zeros preceding each `1` within the chunk, in stream order.
    pub fn zero_runs(&self) -> &[u8] {
        &self.runs[..self.num_ones as usize]
    }
}

/// Count, for every `1` in the chunk (MSB first), the zeros since the
/// previous `1` of the same chunk.
pub fn parallel_zero_count(chunk: u8) -> ChunkResult {
    let mut runs = [0u8; 8];
    let mut num_ones = 0u8;
    let mut cnt = 0u8;
    for j in 0..8 {
        if chunk & (0x80 >> j) == 0 {
            cnt += 1;
        } else {
            runs[num_ones as usize] = cnt;
            num_ones += 1;
            cnt = 0;
        }
    }
    ChunkResult {
        runs,
        num_ones,
        last_bit: chunk & 1 == 1,
        trailing_zeros: cnt,
    }
}

/// Chunked unary decoding in three phases: independent zero counting per
/// chunk, carry reorganization across chunks, and codebook lookup. The final
/// partial chunk is zero padded; decoding stops after `count` symbols.
pub fn parallel_unary_decode(bits: &Bitstream, codebook: &UnaryCodebook, count: usize) -> Result<Vec<u8>> {
    // zero counting: each chunk sees only its own 8 bits
    let chunks: Vec<ChunkResult> = bits.as_bytes().iter().map(|&c| parallel_zero_count(c)).collect();

    // reorganization: a chunk's first run absorbs the zeros left open by
    // the chunks before it. A chunk without any `1` passes all 8 on.
    let mut carry_in = Vec::with_capacity(chunks.len());
    let mut sum = 0usize;
    for c in &chunks {
        carry_in.push(sum);
        if c.num_ones == 0 {
            sum += 8;
        } else {
            sum = c.trailing_zeros as usize;
        }
    }

    // lookup
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    for (c, carry) in chunks.iter().zip(carry_in) {
        for (m, &run) in c.zero_runs().iter().enumerate() {
            let rank = run as usize + if m == 0 { carry } else { 0 };
            out.push(codebook.symbol(rank)?);
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    Err(Error::TruncatedStream {
        decoded: out.len(),
        expected: count,
    })
}

/// Incremental form of the chunked decoder for streaming input.
#[derive(Debug, Clone)]
pub struct UnaryChunkDecoder<'a> {
    codebook: &'a UnaryCodebook,
    carry: usize,
    ready: VecDeque<u8>,
}

impl<'a> UnaryChunkDecoder<'a> {
    pub fn new(codebook: &'a UnaryCodebook) -> Self {
        UnaryChunkDecoder {
            codebook,
            carry: 0,
            ready: VecDeque::new(),
        }
    }

    pub fn push_chunk(&mut self, chunk: u8) -> Result<()> {
        let c = parallel_zero_count(chunk);
        if c.num_ones == 0 {
            self.carry += 8;
            return Ok(());
        }
        for (m, &run) in c.zero_runs().iter().enumerate() {
            let rank = run as usize + if m == 0 { self.carry } else { 0 };
            self.ready.push_back(self.codebook.symbol(rank)?);
        }
        self.carry = c.trailing_zeros as usize;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<u8> {
        self.ready.pop_front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MxNormalized {
    /// Leading zeros of the 8-bit significand; subtracted from the shared
    /// exponent.
    pub shift: u8,
    /// The 7 fraction bits after shifting the leading one out.
    pub mantissa: u8,
    pub is_zero: bool,
}

/// Renormalize one MX significand using the zero counter: the first run
/// of the chunk is the leading-zero count.
pub fn mx_normalize(shifted_mantissa: u8) -> MxNormalized {
    let c = parallel_zero_count(shifted_mantissa);
    if c.num_ones == 0 {
        return MxNormalized {
            shift: 8,
            mantissa: 0,
            is_zero: true,
        };
    }
    let shift = c.zero_runs()[0];
    MxNormalized {
        shift,
        mantissa: (shifted_mantissa << shift) & MANTISSA_MASK,
        is_zero: false,
    }
}

/// Buffer occupancy limit per stream type, in bits.
pub const MAX_BUFFER_BITS: usize = 2 * CACHE_BLOCK_BYTES * 8;

/// Output of a streaming decode session.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingOutput {
    pub values: Vec<Bf16>,
    /// Largest buffer occupancy reached per stream type, in bytes (rounded up).
    pub max_buffered_bytes: [usize; 6],
    pub blocks_consumed: usize,
    pub mx_underflows: usize,
}

/// One decode session over an ordered block sequence.
pub struct StreamingDecoder<'h, 'b, I: Iterator<Item = &'b CacheBlock>> {
    header: &'h TensorHeader,
    view: View,
    blocks: I,
    buffers: [VecDeque<bool>; 6],
    max_bits: [usize; 6],
    consumed: usize,
}

impl<'h, 'b, I: Iterator<Item = &'b CacheBlock>> StreamingDecoder<'h, 'b, I> {
    pub fn new(header: &'h TensorHeader, view: View, blocks: I) -> Self {
        StreamingDecoder {
            header,
            view,
            blocks,
            buffers: Default::default(),
            max_bits: [0; 6],
            consumed: 0,
        }
    }

    fn pull(&mut self, kind: StreamKind) -> Result<()> {
        let block = self
            .blocks
            .next()
            .ok_or_else(|| Error::Corrupt(format!("block sequence ended while {} needed data", kind.name())))?;
        if block.kind != kind {
            return Err(Error::OutOfOrderBlock {
                expected: kind,
                actual: block.kind,
            });
        }
        self.consumed += 1;
        let buf = &mut self.buffers[kind.index()];
        for byte in block.data.iter() {
            for j in 0..8 {
                buf.push_back(byte & (0x80 >> j) != 0);
            }
        }
        if buf.len() > MAX_BUFFER_BITS {
            return Err(Error::BufferOverflow {
                kind,
                bytes: buf.len().div_ceil(8),
            });
        }
        let max = &mut self.max_bits[kind.index()];
        *max = (*max).max(buf.len());
        Ok(())
    }

    fn take_bits(&mut self, kind: StreamKind, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..width {
            if self.buffers[kind.index()].is_empty() {
                self.pull(kind)?;
            }
            let bit = self.buffers[kind.index()].pop_front().unwrap();
            v = (v << 1) | bit as u64;
        }
        Ok(v)
    }

    pub fn run(mut self) -> Result<StreamingOutput> {
        let h = self.header;
        h.validate()?;
        for kind in self.view.kinds() {
            if stream_nonempty(h, kind) {
                self.pull(kind)?;
            }
        }

        let high_w = h.high_width();
        let low_w = h.low_width();
        let block_size = h.mx_block_size();
        let mut unary = h.codebook().map(UnaryChunkDecoder::new);
        let mut shared = 0u8;
        let mut underflows = 0;
        let mut j = 0usize;
        let mut values = Vec::with_capacity(h.numel as usize);

        for _ in 0..h.numel {
            let keep = self.take_bits(StreamKind::Bitmap, 1)? == 1;
            if !keep {
                values.push(match self.view {
                    View::Draft => Bf16::ZERO,
                    View::Target => Bf16::from_bits(self.take_bits(StreamKind::Pruned, 16)? as u16),
                });
                continue;
            }
            if j as u64 >= h.kept {
                return Err(Error::Corrupt("bitmap marks more elements than the header's kept count".into()));
            }
            let sign = self.take_bits(StreamKind::Signs, 1)? == 1;
            let exponent = match h.mode {
                ExponentMode::Unary => {
                    let dec = unary.as_mut().expect("unary header carries a codebook");
                    loop {
                        if let Some(e) = dec.pop() {
                            break e;
                        }
                        let chunk = self.take_bits(StreamKind::Exponents, 8)? as u8;
                        dec.push_chunk(chunk)?;
                    }
                }
                ExponentMode::Mx => {
                    if j.is_multiple_of(block_size) {
                        shared = self.take_bits(StreamKind::Exponents, 8)? as u8;
                    }
                    shared
                }
            };
            let hi = self.take_bits(StreamKind::MantissaHigh, high_w)? as u8;
            let lo = match self.view {
                View::Draft => 0,
                View::Target => self.take_bits(StreamKind::MantissaLow, low_w)? as u8,
            };
            let mantissa = (hi << low_w) | lo;
            let value = match h.mode {
                ExponentMode::Unary => Bf16::compose(sign, exponent, mantissa),
                ExponentMode::Mx => {
                    let n = mx_normalize(mantissa);
                    if n.is_zero {
                        Bf16::compose(sign, 0, 0)
                    } else if exponent <= n.shift {
                        underflows += 1;
                        Bf16::compose(sign, 0, 0)
                    } else {
                        Bf16::compose(sign, exponent - n.shift, n.mantissa)
                    }
                }
            };
            values.push(value);
            j += 1;
        }
        if j as u64 != h.kept {
            return Err(Error::Corrupt(format!("bitmap marks {j} kept elements, header says {}", h.kept)));
        }
        if self.blocks.next().is_some() {
            return Err(Error::Corrupt("blocks left over after the last element".into()));
        }
        Ok(StreamingOutput {
            values,
            max_buffered_bytes: self.max_bits.map(|b| b.div_ceil(8)),
            blocks_consumed: self.consumed,
            mx_underflows: underflows,
        })
    }
}

/// Whether a stream carries any data, judged from the header alone.
pub(crate) fn stream_nonempty(h: &TensorHeader, kind: StreamKind) -> bool {
    match h.fixed_stream_bits(kind) {
        Some(bits) => bits > 0,
        // a unary stream holds at least one codeword per kept element
        None => h.kept > 0,
    }
}

/// Decode a raw block sequence in arrival order.
pub fn streaming_decode_blocks<'b>(
    header: &TensorHeader,
    view: View,
    blocks: impl IntoIterator<Item = &'b CacheBlock>,
) -> Result<StreamingOutput> {
    StreamingDecoder::new(header, view, blocks.into_iter()).run()
}

/// Decode a packed tensor after checking its superblock sequence.
pub fn streaming_decode(header: &TensorHeader, packed: &PackedTensor) -> Result<StreamingOutput> {
    packed.check_sequence()?;
    streaming_decode_blocks(header, packed.view, packed.blocks())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expcodec::{mx_decode_element, unary_decode_sequential, unary_encode};

    #[test]
    fn zero_counter_examples() {
        let c = parallel_zero_count(0b0010_0101);
        assert_eq!(c.zero_runs(), &[2, 2, 1]);
        assert_eq!(c.num_ones, 3);
        assert!(c.last_bit);
        assert_eq!(c.trailing_zeros, 0);

        let c = parallel_zero_count(0xFF);
        assert_eq!(c.zero_runs(), &[0; 8]);
        assert_eq!(c.num_ones, 8);
        assert!(c.last_bit);

        let c = parallel_zero_count(0);
        assert!(c.zero_runs().is_empty());
        assert_eq!(c.num_ones, 0);
        assert!(!c.last_bit);
        assert_eq!(c.trailing_zeros, 8);
    }

    #[test]
    fn zero_counter_invariants_exhaustive() {
        for chunk in 0..=255u8 {
            let c = parallel_zero_count(chunk);
            let zeros: u32 = c.zero_runs().iter().map(|&r| r as u32).sum::<u32>() + c.trailing_zeros as u32;
            assert_eq!(c.num_ones as u32, chunk.count_ones());
            assert_eq!(zeros + c.num_ones as u32, 8);
            assert_eq!(c.last_bit, chunk & 1 == 1);
        }
    }

    #[test]
    fn codeword_spanning_chunks() {
        let ranked: Vec<u8> = (0..16).collect();
        let cb = UnaryCodebook::from_ranked(ranked).unwrap();
        let bits = Bitstream::from_bit_str("000000000 1");
        assert_eq!(parallel_unary_decode(&bits, &cb, 1).unwrap(), vec![9]);
        // a full zero chunk in the middle of a codeword
        let bits = Bitstream::from_bit_str("1 0000000 00000000 1");
        assert_eq!(parallel_unary_decode(&bits, &cb, 2).unwrap(), vec![0, 15]);
    }

    #[test]
    fn all_rank_zero_stream() {
        let cb = UnaryCodebook::from_ranked(vec![42, 7]).unwrap();
        let bits = unary_encode(&[42; 21], &cb).unwrap();
        assert_eq!(parallel_unary_decode(&bits, &cb, 21).unwrap(), vec![42; 21]);
        // stop after `count` even when more codewords follow
        assert_eq!(parallel_unary_decode(&bits, &cb, 5).unwrap(), vec![42; 5]);
    }

    #[test]
    fn truncated_stream_errors() {
        let cb = UnaryCodebook::from_ranked(vec![1, 2, 3]).unwrap();
        let bits = Bitstream::from_bit_str("1 01 00");
        assert_eq!(
            parallel_unary_decode(&bits, &cb, 3),
            Err(Error::TruncatedStream { decoded: 2, expected: 3 })
        );
        assert_eq!(parallel_unary_decode(&bits, &cb, 3), unary_decode_sequential(&bits, &cb, 3));
    }

    #[test]
    fn chunk_results_are_local() {
        let bytes = [0b0001_0010u8, 0x00, 0b1000_0001, 0xF0];
        let base: Vec<ChunkResult> = bytes.iter().map(|&b| parallel_zero_count(b)).collect();
        let mut perturbed = bytes;
        perturbed[1] = 0xAA;
        for (i, &b) in perturbed.iter().enumerate() {
            let r = parallel_zero_count(b);
            if i != 1 {
                assert_eq!(r, base[i]);
            }
        }
    }

    #[test]
    fn mx_normalize_examples() {
        assert_eq!(
            mx_normalize(0b1000_0000),
            MxNormalized {
                shift: 0,
                mantissa: 0,
                is_zero: false
            }
        );
        assert_eq!(
            mx_normalize(0b0100_0000),
            MxNormalized {
                shift: 1,
                mantissa: 0,
                is_zero: false
            }
        );
        assert!(mx_normalize(0).is_zero);
    }

    #[test]
    fn mx_normalize_matches_element_decoder() {
        for shared in [1u8, 2, 5, 8, 100, 127, 254] {
            for m in 0..=255u8 {
                let n = mx_normalize(m);
                let reference = mx_decode_element(shared, true, m);
                let ours = if n.is_zero || shared <= n.shift {
                    Bf16::NEG_ZERO
                } else {
                    Bf16::compose(true, shared - n.shift, n.mantissa)
                };
                assert_eq!(ours, reference.value, "shared {shared} m {m:#010b}");
                if !n.is_zero {
                    assert_eq!(n.shift as u32, m.leading_zeros());
                }
            }
        }
    }
}
