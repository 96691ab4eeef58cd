//! The speculation/verification tensor container.
//!
//! A BF16 tensor plus a [`KeepBitmap`] is split into six bit streams:
//!
//! | stream           | holds                                             | read by        |
//! |------------------|---------------------------------------------------|----------------|
//! | `Bitmap`         | one bit per element                               | draft + target |
//! | `Signs`          | sign of each kept element                         | draft + target |
//! | `Exponents`      | unary codewords (mode 1) or MX shared exponents   | draft + target |
//! | `MantissaHigh`   | top mantissa bits of each kept element            | draft + target |
//! | `MantissaLow`    | the truncated low mantissa bits                   | target only    |
//! | `Pruned`         | raw 16-bit patterns of the unselected elements    | target only    |
//!
//! The draft view zero-pads the missing mantissa bits and writes `+0.0` at
//! pruned positions. The target view concatenates everything back; in mode 1
//! it is bit-identical to the (denormal-flushed) input.

use crate::bf16::{Bf16, MANTISSA_BITS};
use crate::bitstream::Bitstream;
use crate::error::{Error, Result};
use crate::expcodec::{
    mx_decode_element, mx_encode_element, mx_shared_exponent, unary_decode_prefix, unary_encode_into, UnaryCodebook,
    MX_BLOCK_SIZE,
};
use crate::selection::KeepBitmap;

/// Exponent compression scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExponentMode {
    /// Lossless frequency-ranked unary codes.
    Unary = 1,
    /// Lossy shared-exponent blocks.
    Mx = 2,
}

impl ExponentMode {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ExponentMode::Unary),
            2 => Ok(ExponentMode::Mx),
            other => Err(Error::Corrupt(format!("unknown exponent mode {other}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// Draft-model construction parameters shared by weights and KV cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DraftConfig {
    pub mode: ExponentMode,
    /// Fraction of weight elements moved to verification data.
    pub weight_prune: f64,
    pub kv_prune: f64,
    /// Low mantissa bits moved to verification data.
    pub weight_truncate: u8,
    pub kv_truncate: u8,
    /// Draft length per round.
    pub gamma: usize,
}

impl Default for DraftConfig {
    /// 40% pruning, 4-bit truncation, unary exponents, four drafted tokens.
    fn default() -> Self {
        DraftConfig {
            mode: ExponentMode::Unary,
            weight_prune: 0.4,
            kv_prune: 0.4,
            weight_truncate: 4,
            kv_truncate: 4,
            gamma: 4,
        }
    }
}

impl DraftConfig {
    /// No pruning and no truncation: the draft view equals the target view.
    pub fn uncompressed(mode: ExponentMode, gamma: usize) -> Self {
        DraftConfig {
            mode,
            weight_prune: 0.0,
            kv_prune: 0.0,
            weight_truncate: 0,
            kv_truncate: 0,
            gamma,
        }
    }

    /// Same prune fraction and truncation for weights and KV.
    pub fn tied(mode: ExponentMode, prune: f64, truncate: u8, gamma: usize) -> Self {
        DraftConfig {
            mode,
            weight_prune: prune,
            kv_prune: prune,
            weight_truncate: truncate,
            kv_truncate: truncate,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("weight prune", self.weight_prune), ("kv prune", self.kv_prune)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} fraction {p} not in [0, 1)")));
            }
        }
        for (name, t) in [("weight truncate", self.weight_truncate), ("kv truncate", self.kv_truncate)] {
            if t as u32 > MANTISSA_BITS {
                return Err(Error::InvalidParameter(format!("{name} bits {t} exceed 7")));
            }
        }
        if self.gamma == 0 {
            return Err(Error::InvalidParameter("gamma must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weight_codec(&self) -> TensorCodec {
        TensorCodec::new(self.mode, self.weight_truncate)
    }

    pub fn kv_codec(&self) -> TensorCodec {
        TensorCodec::new(self.mode, self.kv_truncate)
    }

    pub fn weight_keep_fraction(&self) -> f64 {
        1.0 - self.weight_prune
    }

    pub fn kv_keep_fraction(&self) -> f64 {
        1.0 - self.kv_prune
    }
}

/// Per-tensor encoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorCodec {
    pub mode: ExponentMode,
    pub truncate_bits: u8,
}

impl TensorCodec {
    pub fn new(mode: ExponentMode, truncate_bits: u8) -> Self {
        TensorCodec { mode, truncate_bits }
    }

    /// Fraction bits kept for speculation, `7 - truncate_bits`.
    pub fn spec_mantissa_bits(&self) -> Result<u8> {
        (MANTISSA_BITS as u8)
            .checked_sub(self.truncate_bits)
            .ok_or_else(|| Error::InvalidParameter(format!("truncate bits {} exceed 7", self.truncate_bits)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamKind {
    Bitmap = 0,
    Signs = 1,
    Exponents = 2,
    MantissaHigh = 3,
    MantissaLow = 4,
    Pruned = 5,
}

impl StreamKind {
    pub const ALL: [StreamKind; 6] = [
        StreamKind::Bitmap,
        StreamKind::Signs,
        StreamKind::Exponents,
        StreamKind::MantissaHigh,
        StreamKind::MantissaLow,
        StreamKind::Pruned,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        StreamKind::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::Corrupt(format!("unknown stream tag {v}")))
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_speculation(self) -> bool {
        self.index() <= StreamKind::MantissaHigh.index()
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Bitmap => "bitmap",
            StreamKind::Signs => "spec_signs",
            StreamKind::Exponents => "spec_exponents",
            StreamKind::MantissaHigh => "spec_mantissa_high",
            StreamKind::MantissaLow => "verify_mantissa_low",
            StreamKind::Pruned => "verify_pruned",
        }
    }
}

/// Which reconstruction a reader wants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// Speculation streams only, zero-padded.
    Draft,
    /// All streams.
    Target,
}

impl View {
    pub fn includes(self, kind: StreamKind) -> bool {
        self == View::Target || kind.is_speculation()
    }

    pub fn kinds(self) -> impl Iterator<Item = StreamKind> {
        StreamKind::ALL.into_iter().filter(move |k| self.includes(*k))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum ExponentTable {
    Unary(UnaryCodebook),
    Mx { block_size: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub mode: ExponentMode,
    pub dims: Vec<u32>,
    pub numel: u64,
    pub kept: u64,
    /// Mantissa fraction bits in the speculation stream (`m_s`).
    pub spec_mantissa_bits: u8,
    pub exponents: ExponentTable,
}

impl TensorHeader {
    pub fn pruned(&self) -> u64 {
        self.numel - self.kept
    }

    /// Width of each kept element's entry in the mantissa-high stream. MX
    /// keeps the explicit leading bit, so it stores one extra bit.
    pub fn high_width(&self) -> u32 {
        match self.mode {
            ExponentMode::Unary => self.spec_mantissa_bits as u32,
            ExponentMode::Mx => self.spec_mantissa_bits as u32 + 1,
        }
    }

    pub fn low_width(&self) -> u32 {
        MANTISSA_BITS - self.spec_mantissa_bits as u32
    }

    pub fn mx_block_size(&self) -> usize {
        match self.exponents {
            ExponentTable::Mx { block_size } => block_size as usize,
            ExponentTable::Unary(_) => 0,
        }
    }

    pub fn codebook(&self) -> Option<&UnaryCodebook> {
        match &self.exponents {
            ExponentTable::Unary(cb) => Some(cb),
            ExponentTable::Mx { .. } => None,
        }
    }

    /// Bit length of a stream, if it follows from the header alone. Unary
    /// exponent streams do not.
    pub fn fixed_stream_bits(&self, kind: StreamKind) -> Option<u64> {
        let k = self.kept;
        Some(match kind {
            StreamKind::Bitmap => self.numel,
            StreamKind::Signs => k,
            StreamKind::Exponents => match self.exponents {
                ExponentTable::Unary(_) => return None,
                ExponentTable::Mx { block_size } => 8 * k.div_ceil(block_size as u64),
            },
            StreamKind::MantissaHigh => k * self.high_width() as u64,
            StreamKind::MantissaLow => k * self.low_width() as u64,
            StreamKind::Pruned => 16 * self.pruned(),
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let product = self.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if product != Some(self.numel) {
            return Err(Error::Corrupt(format!("dims {:?} do not multiply to {}", self.dims, self.numel)));
        }
        if self.kept == 0 || self.kept > self.numel {
            return Err(Error::Corrupt(format!("kept count {} invalid for {} elements", self.kept, self.numel)));
        }
        if self.spec_mantissa_bits as u32 > MANTISSA_BITS {
            return Err(Error::Corrupt(format!("m_s = {} exceeds 7", self.spec_mantissa_bits)));
        }
        match (&self.exponents, self.mode) {
            (ExponentTable::Unary(_), ExponentMode::Unary) => Ok(()),
            (ExponentTable::Mx { block_size }, ExponentMode::Mx) if *block_size > 0 => Ok(()),
            _ => Err(Error::Corrupt("exponent table does not match mode".into())),
        }
    }
}

/// An encoded tensor: header plus the six streams in [`StreamKind`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CassandraTensor {
    pub header: TensorHeader,
    pub streams: [Bitstream; 6],
}

pub fn encode_tensor(values: &[Bf16], dims: &[u32], bitmap: &KeepBitmap, codec: TensorCodec) -> Result<CassandraTensor> {
    let numel = dims.iter().map(|&d| d as usize).product::<usize>();
    if numel != values.len() || dims.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: numel,
            actual: values.len(),
        });
    }
    if bitmap.len() != values.len() {
        return Err(Error::ShapeMismatch {
            expected: values.len(),
            actual: bitmap.len(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if bitmap.kept_count() == 0 {
        return Err(Error::EmptySpeculation);
    }
    let m_s = codec.spec_mantissa_bits()?;
    let low_width = MANTISSA_BITS - m_s as u32;
    let low_mask = (1u8 << low_width) - 1;

    let mut kept = Vec::with_capacity(bitmap.kept_count());
    let mut pruned_stream = Bitstream::with_capacity(16 * (values.len() - bitmap.kept_count()));
    for (v, keep) in values.iter().zip(bitmap.iter()) {
        let v = v.flush_denormal();
        if keep {
            kept.push(v);
        } else {
            pruned_stream.push_bits(v.to_bits() as u64, 16);
        }
    }

    let k = kept.len();
    let mut signs = Bitstream::with_capacity(k);
    let mut exps = Bitstream::new();
    let mut high = Bitstream::with_capacity(k * (m_s as usize + 1));
    let mut low = Bitstream::with_capacity(k * low_width as usize);
    for v in &kept {
        signs.push_bit(v.sign());
    }

    // exponents are compressed first; truncation then splits whatever
    // mantissa representation the exponent scheme produced
    let exponents = match codec.mode {
        ExponentMode::Unary => {
            let raw: Vec<u8> = kept.iter().map(|v| v.exponent()).collect();
            let codebook = UnaryCodebook::build(&raw)?;
            unary_encode_into(&raw, &codebook, &mut exps)?;
            for v in &kept {
                let m = v.mantissa();
                high.push_bits((m >> low_width) as u64, m_s as u32);
                low.push_bits((m & low_mask) as u64, low_width);
            }
            ExponentTable::Unary(codebook)
        }
        ExponentMode::Mx => {
            for block in kept.chunks(MX_BLOCK_SIZE) {
                let shared = mx_shared_exponent(block);
                exps.push_bits(shared as u64, 8);
                for &v in block {
                    let sm = mx_encode_element(v, shared).shifted_mantissa;
                    high.push_bits((sm >> low_width) as u64, m_s as u32 + 1);
                    low.push_bits((sm & low_mask) as u64, low_width);
                }
            }
            ExponentTable::Mx {
                block_size: MX_BLOCK_SIZE as u16,
            }
        }
    };

    Ok(CassandraTensor {
        header: TensorHeader {
            mode: codec.mode,
            dims: dims.to_vec(),
            numel: values.len() as u64,
            kept: k as u64,
            spec_mantissa_bits: m_s,
            exponents,
        },
        streams: [bitmap.as_bitstream().clone(), signs, exps, high, low, pruned_stream],
    })
}

/// Decoded exponent information for the kept elements.
pub(crate) enum KeptExponents {
    Unary(Vec<u8>),
    Mx(Vec<u8>),
}

impl CassandraTensor {
    #[inline]
    pub fn stream(&self, kind: StreamKind) -> &Bitstream {
        &self.streams[kind.index()]
    }

    pub fn numel(&self) -> usize {
        self.header.numel as usize
    }

    pub fn kept(&self) -> usize {
        self.header.kept as usize
    }

    /// Exact bit length of the unary stream's `kept` codewords, or the fixed
    /// MX length.
    pub fn exponent_stream_bits(&self) -> u64 {
        self.stream(StreamKind::Exponents).len() as u64
    }

    fn check_streams(&self, view: View) -> Result<()> {
        self.header.validate()?;
        for kind in view.kinds() {
            if let Some(expected) = self.header.fixed_stream_bits(kind) {
                let actual = self.stream(kind).len() as u64;
                if actual != expected {
                    return Err(Error::Corrupt(format!(
                        "{} holds {actual} bits, expected {expected}",
                        kind.name()
                    )));
                }
            }
        }
        let kept_bits = self.stream(StreamKind::Bitmap).count_ones() as u64;
        if kept_bits != self.header.kept {
            return Err(Error::Corrupt(format!(
                "bitmap marks {kept_bits} kept elements, header says {}",
                self.header.kept
            )));
        }
        Ok(())
    }

    pub(crate) fn kept_exponents(&self) -> Result<KeptExponents> {
        let exps = self.stream(StreamKind::Exponents);
        match &self.header.exponents {
            ExponentTable::Unary(cb) => Ok(KeptExponents::Unary(unary_decode_prefix(exps, cb, self.kept())?.0)),
            ExponentTable::Mx { .. } => Ok(KeptExponents::Mx(exps.as_bytes().to_vec())),
        }
    }

    /// Reconstruct a view, also reporting how many MX elements underflowed.
    pub fn decode_with_report(&self, view: View) -> Result<(Vec<Bf16>, usize)> {
        self.check_streams(view)?;
        let exponents = self.kept_exponents()?;
        let h = &self.header;
        let high_w = h.high_width();
        let low_w = h.low_width();
        let mut bitmap = self.stream(StreamKind::Bitmap).reader();
        let mut signs = self.stream(StreamKind::Signs).reader();
        let mut high = self.stream(StreamKind::MantissaHigh).reader();
        let mut low = self.stream(StreamKind::MantissaLow).reader();
        let mut pruned = self.stream(StreamKind::Pruned).reader();
        let corrupt = || Error::Corrupt("stream ended early".into());

        let mut out = Vec::with_capacity(self.numel());
        let mut underflows = 0;
        let mut j = 0usize;
        for _ in 0..self.numel() {
            let keep = bitmap.read_bit().ok_or_else(corrupt)?;
            if !keep {
                out.push(match view {
                    View::Draft => Bf16::ZERO,
                    View::Target => Bf16::from_bits(pruned.read_bits(16).ok_or_else(corrupt)? as u16),
                });
                continue;
            }
            let sign = signs.read_bit().ok_or_else(corrupt)?;
            let hi = high.read_bits(high_w).ok_or_else(corrupt)? as u8;
            let lo = match view {
                View::Draft => 0,
                View::Target => low.read_bits(low_w).ok_or_else(corrupt)? as u8,
            };
            let mantissa = (hi << low_w) | lo;
            let value = match &exponents {
                KeptExponents::Unary(e) => Bf16::compose(sign, e[j], mantissa),
                KeptExponents::Mx(shared) => {
                    let d = mx_decode_element(shared[j / h.mx_block_size()], sign, mantissa);
                    underflows += d.underflow as usize;
                    d.value
                }
            };
            out.push(value);
            j += 1;
        }
        Ok((out, underflows))
    }

    /// Zero-padded reconstruction from the speculation streams alone.
    pub fn decode_draft(&self) -> Result<Vec<Bf16>> {
        self.decode_with_report(View::Draft).map(|(v, _)| v)
    }

    pub fn decode_target(&self) -> Result<Vec<Bf16>> {
        self.decode_with_report(View::Target).map(|(v, _)| v)
    }

    pub fn view_bits(&self, view: View) -> u64 {
        view.kinds().map(|k| self.stream(k).len() as u64).sum()
    }

    pub fn compression_stats(&self) -> CompressionStats {
        let n = self.header.numel as f64;
        let spec_bits = self.view_bits(View::Draft);
        let total_bits = self.view_bits(View::Target);
        CompressionStats {
            numel: self.header.numel,
            kept: self.header.kept,
            bitmap_bits: self.stream(StreamKind::Bitmap).len() as u64,
            spec_bits,
            verify_bits: total_bits - spec_bits,
            total_bits,
            spec_bits_per_elem: spec_bits as f64 / n,
            total_bits_per_elem: total_bits as f64 / n,
        }
    }
}

/// Stream-level size accounting. The bitmap is charged to speculation
/// traffic because the draft pass has to read it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionStats {
    pub numel: u64,
    pub kept: u64,
    pub bitmap_bits: u64,
    pub spec_bits: u64,
    pub verify_bits: u64,
    pub total_bits: u64,
    pub spec_bits_per_elem: f64,
    pub total_bits_per_elem: f64,
}

impl CompressionStats {
    /// BF16 bits over speculation bits; how much less the draft reads.
    pub fn draft_compression_ratio(&self) -> f64 {
        16.0 / self.spec_bits_per_elem
    }

    /// Fraction of a full BF16 load the draft pass reads.
    pub fn draft_fraction(&self) -> f64 {
        self.spec_bits_per_elem / 16.0
    }

    /// Stored size relative to plain BF16.
    pub fn storage_ratio(&self) -> f64 {
        self.total_bits_per_elem / 16.0
    }

    pub fn spec_bytes(&self) -> f64 {
        self.spec_bits as f64 / 8.0
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits as f64 / 8.0
    }
}
