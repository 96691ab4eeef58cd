//! Superblock packing.
//!
//! Streams of different types are interleaved into 128-byte cache blocks in
//! the order a decoder consuming one element at a time would run dry of
//! each type. Reading the blocks front to back is then contiguous: the
//! decoder never stalls waiting for a type that comes later, and never
//! holds more than one block plus a partial leftover per type.
//!
//! Blocks are grouped into fixed-size superblocks, the unit of load and
//! eviction.

use crate::container::{CassandraTensor, ExponentMode, ExponentTable, StreamKind, View};
use crate::decoder_sim::stream_nonempty;
use crate::error::{Error, Result};
use crate::expcodec::unary_decode_prefix;

pub const CACHE_BLOCK_BYTES: usize = 128;
pub const DEFAULT_SUPERBLOCK_BLOCKS: usize = 8;

const BLOCK_BITS: u64 = CACHE_BLOCK_BYTES as u64 * 8;

#[derive(Clone, PartialEq, Eq)]
pub struct CacheBlock {
    pub kind: StreamKind,
    pub data: [u8; CACHE_BLOCK_BYTES],
}

impl std::fmt::Debug for CacheBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CacheBlock({:?})", self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superblock {
    pub index: u32,
    pub blocks: Vec<CacheBlock>,
}

/// A packed view of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    pub view: View,
    pub blocks_per_superblock: usize,
    /// Byte length of each packed stream; zero for types outside the view.
    pub stream_bytes: [u64; 6],
    pub superblocks: Vec<Superblock>,
}

impl PackedTensor {
    pub fn blocks(&self) -> impl Iterator<Item = &CacheBlock> {
        self.superblocks.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn block_count(&self) -> usize {
        self.superblocks.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn packed_bytes(&self) -> usize {
        self.block_count() * CACHE_BLOCK_BYTES
    }

    fn expected_blocks(&self) -> usize {
        self.stream_bytes
            .iter()
            .map(|&b| b.div_ceil(CACHE_BLOCK_BYTES as u64) as usize)
            .sum()
    }

    /// Superblocks must be numbered `0..n` in order, with `n` large enough to
    /// hold every stream byte.
    pub fn check_sequence(&self) -> Result<()> {
        if self.blocks_per_superblock == 0 {
            return Err(Error::Corrupt("superblock size is zero".into()));
        }
        for (i, sb) in self.superblocks.iter().enumerate() {
            let i = i as u32;
            if sb.index != i {
                return Err(if sb.index < i {
                    Error::DuplicateSuperblock(sb.index)
                } else {
                    Error::MissingSuperblock(i)
                });
            }
            if sb.blocks.len() > self.blocks_per_superblock {
                return Err(Error::Corrupt(format!(
                    "superblock {i} holds {} blocks, limit {}",
                    sb.blocks.len(),
                    self.blocks_per_superblock
                )));
            }
        }
        let expected = self.expected_blocks().div_ceil(self.blocks_per_superblock);
        if self.superblocks.len() < expected {
            return Err(Error::MissingSuperblock(self.superblocks.len() as u32));
        }
        if self.block_count() != self.expected_blocks() {
            return Err(Error::Corrupt(format!(
                "{} blocks present, streams need {}",
                self.block_count(),
                self.expected_blocks()
            )));
        }
        Ok(())
    }
}

/// Per-element demand on each stream, in bits, as seen by a decoder that
/// processes one element (all of its fields) per step.
fn element_demands(t: &CassandraTensor, view: View) -> Result<Vec<[u64; 6]>> {
    let h = &t.header;
    let high_w = h.high_width() as u64;
    let low_w = h.low_width() as u64;
    // chunk-granular consumption of the unary stream: the decoder pulls
    // whole 8-bit chunks until the element's codeword has terminated
    let unary_chunk_ends: Option<Vec<u64>> = match &h.exponents {
        ExponentTable::Unary(cb) => {
            let (exps, _) = unary_decode_prefix(t.stream(StreamKind::Exponents), cb, t.kept())?;
            let mut end = 0u64;
            Some(
                exps.iter()
                    .map(|&e| {
                        end += cb.code_len(e).expect("decoded symbol is in codebook") as u64;
                        end.div_ceil(8) * 8
                    })
                    .collect(),
            )
        }
        ExponentTable::Mx { .. } => None,
    };
    let bitmap = t.stream(StreamKind::Bitmap);
    let mut out = Vec::with_capacity(t.numel());
    let mut j = 0usize;
    let mut prev_chunk_end = 0u64;
    for i in 0..t.numel() {
        let mut d = [0u64; 6];
        d[StreamKind::Bitmap.index()] = 1;
        if bitmap.get(i) {
            d[StreamKind::Signs.index()] = 1;
            d[StreamKind::Exponents.index()] = match h.mode {
                ExponentMode::Unary => {
                    let end = unary_chunk_ends.as_ref().unwrap()[j];
                    let step = end - prev_chunk_end;
                    prev_chunk_end = end;
                    step
                }
                ExponentMode::Mx => {
                    if j.is_multiple_of(h.mx_block_size()) {
                        8
                    } else {
                        0
                    }
                }
            };
            d[StreamKind::MantissaHigh.index()] = high_w;
            if view == View::Target {
                d[StreamKind::MantissaLow.index()] = low_w;
            }
            j += 1;
        } else if view == View::Target {
            d[StreamKind::Pruned.index()] = 16;
        }
        out.push(d);
    }
    Ok(out)
}

/// Block emission order from the consumption simulation: after a warm-up
/// block per non-empty type, the next block of a type is emitted exactly
/// when the element about to be decoded would underflow that type's buffer.
pub fn block_schedule(t: &CassandraTensor, view: View) -> Result<Vec<StreamKind>> {
    let mut schedule = Vec::new();
    let mut buffered = [0u64; 6];
    for kind in view.kinds() {
        if stream_nonempty(&t.header, kind) {
            schedule.push(kind);
            buffered[kind.index()] += BLOCK_BITS;
        }
    }
    for demand in element_demands(t, view)? {
        for kind in StreamKind::ALL {
            let need = demand[kind.index()];
            if need == 0 {
                continue;
            }
            while buffered[kind.index()] < need {
                schedule.push(kind);
                buffered[kind.index()] += BLOCK_BITS;
            }
            buffered[kind.index()] -= need;
        }
    }
    Ok(schedule)
}

pub fn pack(t: &CassandraTensor, view: View, blocks_per_superblock: usize) -> Result<PackedTensor> {
    if blocks_per_superblock == 0 || blocks_per_superblock > u8::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "superblock size {blocks_per_superblock} not in 1..=255"
        )));
    }
    let schedule = block_schedule(t, view)?;
    let mut next_block = [0usize; 6];
    let mut blocks = Vec::with_capacity(schedule.len());
    for kind in schedule {
        let bytes = t.stream(kind).as_bytes();
        let start = next_block[kind.index()] * CACHE_BLOCK_BYTES;
        let end = (start + CACHE_BLOCK_BYTES).min(bytes.len());
        if start >= bytes.len() {
            return Err(Error::Corrupt(format!("{} has fewer blocks than its demand", kind.name())));
        }
        let mut data = [0u8; CACHE_BLOCK_BYTES];
        data[..end - start].copy_from_slice(&bytes[start..end]);
        blocks.push(CacheBlock { kind, data });
        next_block[kind.index()] += 1;
    }
    let mut stream_bytes = [0u64; 6];
    for kind in view.kinds() {
        stream_bytes[kind.index()] = t.stream(kind).byte_len() as u64;
    }
    let superblocks = blocks
        .chunks(blocks_per_superblock)
        .enumerate()
        .map(|(i, chunk)| Superblock {
            index: i as u32,
            blocks: chunk.to_vec(),
        })
        .collect();
    let packed = PackedTensor {
        view,
        blocks_per_superblock,
        stream_bytes,
        superblocks,
    };
    debug_assert!(packed.check_sequence().is_ok());
    Ok(packed)
}

/// Reassemble each stream's bytes by concatenating same-type blocks in
/// arrival order. Types outside the packed view come back empty.
pub fn unpack(packed: &PackedTensor) -> Result<[Vec<u8>; 6]> {
    packed.check_sequence()?;
    let mut out: [Vec<u8>; 6] = Default::default();
    for block in packed.blocks() {
        out[block.kind.index()].extend_from_slice(&block.data);
    }
    for kind in StreamKind::ALL {
        let want = packed.stream_bytes[kind.index()] as usize;
        let have = out[kind.index()].len();
        if have < want || have - want >= CACHE_BLOCK_BYTES {
            return Err(Error::Corrupt(format!(
                "{} reassembled to {have} bytes, expected {want}",
                kind.name()
            )));
        }
        out[kind.index()].truncate(want);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bf16::Bf16;
    use crate::container::{encode_tensor, TensorCodec};
    use crate::decoder_sim::{streaming_decode, streaming_decode_blocks};
    use crate::selection::KeepBitmap;

    fn sample(n: usize, keep_every: usize, mode: ExponentMode, t: u8) -> CassandraTensor {
        let vals: Vec<Bf16> = (0..n)
            .map(|i| Bf16::from_f32(((i * 7919) % 1000) as f32 / 977.0 - 0.5).unwrap())
            .collect();
        let keep: Vec<bool> = (0..n).map(|i| i % keep_every != 1).collect();
        encode_tensor(&vals, &[n as u32], &KeepBitmap::from_bools(&keep), TensorCodec::new(mode, t)).unwrap()
    }

    #[test]
    fn small_tensor_fits_one_superblock() {
        let t = sample(40, 3, ExponentMode::Unary, 3);
        let p = pack(&t, View::Target, 8).unwrap();
        assert_eq!(p.superblocks.len(), 1);
        let kinds: Vec<StreamKind> = p.blocks().map(|b| b.kind).collect();
        assert_eq!(kinds, StreamKind::ALL.to_vec());
        let out = streaming_decode(&t.header, &p).unwrap();
        assert_eq!(out.values, t.decode_target().unwrap());
        assert_eq!(out.blocks_consumed, 6);
    }

    #[test]
    fn keep_all_has_no_pruned_blocks() {
        let vals: Vec<Bf16> = (0..3000).map(|i| Bf16::from_f32((i as f32).cos()).unwrap()).collect();
        let t = encode_tensor(&vals, &[3000], &KeepBitmap::all_kept(3000), TensorCodec::new(ExponentMode::Unary, 2))
            .unwrap();
        let p = pack(&t, View::Target, 8).unwrap();
        assert!(p.blocks().all(|b| b.kind != StreamKind::Pruned));
    }

    #[test]
    fn round_trip_both_views_and_modes() {
        for mode in [ExponentMode::Unary, ExponentMode::Mx] {
            let t = sample(5000, 3, mode, 4);
            for view in [View::Draft, View::Target] {
                let p = pack(&t, view, 8).unwrap();
                let streams = unpack(&p).unwrap();
                for kind in StreamKind::ALL {
                    if view.includes(kind) {
                        assert_eq!(streams[kind.index()], t.stream(kind).as_bytes());
                    } else {
                        assert!(streams[kind.index()].is_empty());
                    }
                }
                let out = streaming_decode(&t.header, &p).unwrap();
                let expected = match view {
                    View::Draft => t.decode_draft().unwrap(),
                    View::Target => t.decode_target().unwrap(),
                };
                assert_eq!(out.values, expected);
                assert!(out.max_buffered_bytes.iter().all(|&b| b <= 256));
            }
        }
    }

    #[test]
    fn draft_pack_has_no_verification_bytes() {
        let t = sample(4000, 2, ExponentMode::Unary, 5);
        let p = pack(&t, View::Draft, 8).unwrap();
        assert!(p.blocks().all(|b| b.kind.is_speculation()));
        let spec_bytes: usize = View::Draft.kinds().map(|k| t.stream(k).byte_len()).sum();
        assert_eq!(p.stream_bytes.iter().sum::<u64>() as usize, spec_bytes);
    }

    #[test]
    fn truncated_sequence_is_missing_index() {
        let t = sample(6000, 3, ExponentMode::Unary, 4);
        let mut p = pack(&t, View::Target, 4).unwrap();
        assert!(p.superblocks.len() > 2);
        let n = p.superblocks.len();
        p.superblocks.pop();
        assert_eq!(unpack(&p), Err(Error::MissingSuperblock(n as u32 - 1)));

        let mut q = pack(&t, View::Target, 4).unwrap();
        q.superblocks.remove(1);
        assert_eq!(unpack(&q), Err(Error::MissingSuperblock(1)));

        let mut d = pack(&t, View::Target, 4).unwrap();
        let dup = d.superblocks[0].clone();
        d.superblocks.insert(1, dup);
        assert_eq!(unpack(&d), Err(Error::DuplicateSuperblock(0)));
    }

    #[test]
    fn swapped_blocks_are_out_of_order() {
        let t = sample(6000, 3, ExponentMode::Unary, 4);
        let p = pack(&t, View::Target, 8).unwrap();
        let mut blocks: Vec<CacheBlock> = p.blocks().cloned().collect();
        let (a, b) = (0..blocks.len() - 1)
            .flat_map(|i| (i + 1..blocks.len()).map(move |j| (i, j)))
            .find(|&(i, j)| blocks[i].kind != blocks[j].kind && i > 6)
            .unwrap();
        blocks.swap(a, b);
        let err = streaming_decode_blocks(&t.header, View::Target, &blocks).unwrap_err();
        assert!(matches!(err, Error::OutOfOrderBlock { .. }), "{err:?}");
    }

    #[test]
    fn density_bound() {
        let t = sample(7000, 4, ExponentMode::Mx, 1);
        let p = pack(&t, View::Target, 8).unwrap();
        let stream_total: u64 = p.stream_bytes.iter().sum();
        assert!(p.packed_bytes() as u64 <= stream_total + 6 * 127);
    }
}
