//! `.cass` serialization.
//!
//! ```text
//! magic "CASS" | version u16 | mode u8 | dtype u8 | rank u8 | dims u32 * rank
//! N u64 | K u64 | m_s u8 | flags u8
//! mode 1: codebook length u16 + ranked symbol bytes
//! mode 2: MX block size u16
//! six section byte offsets u64
//! sections: bitmap, spec_signs, spec_exponents, spec_mantissa_high,
//!           verify_mantissa_low, verify_pruned
//! [packed section if flags & 1]
//! ```
//!
//! Integers are little-endian; section payloads are MSB-first bit streams,
//! each starting on a byte boundary. The packed section is
//! `view u8 | blocks_per_superblock u16 | superblock count u32` followed by
//! `index u32 | block count u8 | (tag u8, 128 data bytes)*` per superblock.

use std::ops::Range;

use crate::bitstream::Bitstream;
use crate::container::{CassandraTensor, ExponentMode, ExponentTable, StreamKind, TensorHeader, View};
use crate::error::{Error, Result};
use crate::expcodec::{unary_decode_prefix, UnaryCodebook};
use crate::superblock::{CacheBlock, PackedTensor, Superblock, CACHE_BLOCK_BYTES};

pub const MAGIC: [u8; 4] = *b"CASS";
pub const VERSION: u16 = 1;
pub const DTYPE_BF16: u8 = 0;
const FLAG_PACKED: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CassFile {
    pub tensor: CassandraTensor,
    pub packed: Option<PackedTensor>,
}

/// Byte layout of a serialized file, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLayout {
    pub header_bytes: usize,
    pub sections: [Range<usize>; 6],
    pub packed: Option<Range<usize>>,
    pub file_bytes: usize,
}

impl CassFile {
    pub fn new(tensor: CassandraTensor) -> Self {
        CassFile { tensor, packed: None }
    }

    pub fn with_packed(tensor: CassandraTensor, packed: PackedTensor) -> Self {
        CassFile {
            tensor,
            packed: Some(packed),
        }
    }

    fn header_len(h: &TensorHeader) -> usize {
        let table = match &h.exponents {
            ExponentTable::Unary(cb) => 2 + cb.len(),
            ExponentTable::Mx { .. } => 2,
        };
        4 + 2 + 1 + 1 + 1 + 4 * h.dims.len() + 8 + 8 + 1 + 1 + table + 6 * 8
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.tensor;
        let h = &t.header;
        if h.dims.len() > u8::MAX as usize {
            return Err(Error::InvalidParameter("tensor rank exceeds 255".into()));
        }
        let mut out = Vec::with_capacity(Self::header_len(h) + t.view_bits(View::Target) as usize / 8 + 64);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(h.mode.as_u8());
        out.push(DTYPE_BF16);
        out.push(h.dims.len() as u8);
        for d in &h.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&h.numel.to_le_bytes());
        out.extend_from_slice(&h.kept.to_le_bytes());
        out.push(h.spec_mantissa_bits);
        out.push(if self.packed.is_some() { FLAG_PACKED } else { 0 });
        match &h.exponents {
            ExponentTable::Unary(cb) => {
                out.extend_from_slice(&(cb.len() as u16).to_le_bytes());
                out.extend_from_slice(cb.ranked_symbols());
            }
            ExponentTable::Mx { block_size } => out.extend_from_slice(&block_size.to_le_bytes()),
        }
        let mut offset = Self::header_len(h) as u64;
        for kind in StreamKind::ALL {
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.stream(kind).byte_len() as u64;
        }
        debug_assert_eq!(out.len(), Self::header_len(h));
        for kind in StreamKind::ALL {
            out.extend_from_slice(t.stream(kind).as_bytes());
        }
        if let Some(p) = &self.packed {
            write_packed(p, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (file, _) = parse(bytes)?;
        Ok(file)
    }

    pub fn layout(bytes: &[u8]) -> Result<FileLayout> {
        parse(bytes).map(|(_, layout)| layout)
    }
}

fn write_packed(p: &PackedTensor, out: &mut Vec<u8>) -> Result<()> {
    out.push(match p.view {
        View::Draft => 0,
        View::Target => 1,
    });
    let per = u16::try_from(p.blocks_per_superblock)
        .map_err(|_| Error::InvalidParameter("superblock size exceeds u16".into()))?;
    out.extend_from_slice(&per.to_le_bytes());
    out.extend_from_slice(&(p.superblocks.len() as u32).to_le_bytes());
    for sb in &p.superblocks {
        out.extend_from_slice(&sb.index.to_le_bytes());
        let count = u8::try_from(sb.blocks.len())
            .map_err(|_| Error::InvalidParameter("superblock holds more than 255 blocks".into()))?;
        out.push(count);
        for b in &sb.blocks {
            out.push(b.kind as u8);
            out.extend_from_slice(&b.data);
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<(CassFile, FileLayout)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c
        .take(4)
        .map_err(|_| Error::BadMagic([0; 4]))?
        .try_into()
        .unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode = ExponentMode::from_u8(c.u8()?)?;
    let dtype = c.u8()?;
    if dtype != DTYPE_BF16 {
        return Err(Error::Corrupt(format!("unsupported dtype {dtype}")));
    }
    let rank = c.u8()? as usize;
    let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let numel = c.u64()?;
    let kept = c.u64()?;
    let spec_mantissa_bits = c.u8()?;
    let flags = c.u8()?;
    if flags & !FLAG_PACKED != 0 {
        return Err(Error::Corrupt(format!("unknown flags {flags:#x}")));
    }
    let exponents = match mode {
        ExponentMode::Unary => {
            let len = c.u16()? as usize;
            ExponentTable::Unary(UnaryCodebook::from_ranked(c.take(len)?.to_vec())?)
        }
        ExponentMode::Mx => ExponentTable::Mx { block_size: c.u16()? },
    };
    let header = TensorHeader {
        mode,
        dims,
        numel,
        kept,
        spec_mantissa_bits,
        exponents,
    };
    header.validate()?;
    let offsets: Vec<u64> = (0..6).map(|_| c.u64()).collect::<Result<_>>()?;
    let header_bytes = c.pos;
    if offsets[0] != header_bytes as u64 {
        return Err(Error::Corrupt("first section does not follow the header".into()));
    }

    let mut sections: [Range<usize>; 6] = Default::default();
    let mut streams: [Bitstream; 6] = Default::default();
    for kind in StreamKind::ALL {
        let i = kind.index();
        let start = offsets[i] as usize;
        let len = match header.fixed_stream_bits(kind) {
            Some(bits) => bits.div_ceil(8) as usize,
            None => {
                let next = offsets[i + 1];
                next.checked_sub(offsets[i])
                    .ok_or_else(|| Error::Corrupt("section offsets decrease".into()))? as usize
            }
        };
        if i + 1 < 6 && offsets[i + 1] != (start + len) as u64 {
            return Err(Error::Corrupt(format!("{} has the wrong byte length", kind.name())));
        }
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("{} runs past end of file", kind.name())))?;
        let data = bytes[start..end].to_vec();
        let bit_len = match (header.fixed_stream_bits(kind), &header.exponents) {
            (Some(bits), _) => bits as usize,
            (None, ExponentTable::Unary(cb)) => {
                let raw = Bitstream::from_bytes(data.clone(), data.len() * 8)?;
                unary_decode_prefix(&raw, cb, kept as usize)?.1
            }
            (None, ExponentTable::Mx { .. }) => unreachable!("MX exponent streams have a fixed length"),
        };
        streams[i] = Bitstream::from_bytes(data, bit_len)?;
        sections[i] = start..end;
    }
    let tensor = CassandraTensor { header, streams };
    let body_end = sections[5].end;

    let (packed, packed_range) = if flags & FLAG_PACKED != 0 {
        c.pos = body_end;
        let p = parse_packed(&mut c, &tensor)?;
        (Some(p), Some(body_end..c.pos))
    } else {
        c.pos = body_end;
        (None, None)
    };
    if c.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((
        CassFile { tensor, packed },
        FileLayout {
            header_bytes,
            sections,
            packed: packed_range,
            file_bytes: bytes.len(),
        },
    ))
}

fn parse_packed(c: &mut Cursor<'_>, tensor: &CassandraTensor) -> Result<PackedTensor> {
    let view = match c.u8()? {
        0 => View::Draft,
        1 => View::Target,
        v => return Err(Error::Corrupt(format!("unknown packed view {v}"))),
    };
    let blocks_per_superblock = c.u16()? as usize;
    let count = c.u32()? as usize;
    let mut superblocks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = c.u32()?;
        let n = c.u8()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = StreamKind::from_u8(c.u8()?)?;
            let data: [u8; CACHE_BLOCK_BYTES] = c.take(CACHE_BLOCK_BYTES)?.try_into().unwrap();
            blocks.push(CacheBlock { kind, data });
        }
        superblocks.push(Superblock { index, blocks });
    }
    let mut stream_bytes = [0u64; 6];
    for kind in view.kinds() {
        stream_bytes[kind.index()] = tensor.stream(kind).byte_len() as u64;
    }
    let packed = PackedTensor {
        view,
        blocks_per_superblock,
        stream_bytes,
        superblocks,
    };
    packed.check_sequence()?;
    Ok(packed)
}
