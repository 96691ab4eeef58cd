//! Raw tensor files: 4-byte magic (`BF16` or `F32 `), rank as one byte,
//! one little-endian `u32` per dimension, then the little-endian payload.

use std::path::Path;

use cassandra_core::bf16::{round_slice, Bf16};

use crate::error::CliError;

pub const MAGIC_BF16: [u8; 4] = *b"BF16";
pub const MAGIC_F32: [u8; 4] = *b"F32 ";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub values: Vec<Bf16>,
}

impl RawTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows and columns for per-row selection: the last dimension is the
    /// row length.
    pub fn matrix_shape(&self) -> (usize, usize) {
        let cols = *self.dims.last().unwrap_or(&1) as usize;
        (self.numel() / cols.max(1), cols)
    }
}

pub fn parse(bytes: &[u8]) -> Result<RawTensor, CliError> {
    let bad = |m: &str| CliError::Input(format!("tensor file: {m}"));
    if bytes.len() < 5 {
        return Err(bad("too short"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    let width = match magic {
        MAGIC_BF16 => 2,
        MAGIC_F32 => 4,
        _ => return Err(bad("unknown magic")),
    };
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(bad("rank 0"));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated dims"));
    }
    let dims: Vec<u32> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| bad("dims overflow"))?;
    let payload = &bytes[header..];
    if payload.len() != numel * width {
        return Err(bad(&format!("payload is {} bytes, dims need {}", payload.len(), numel * width)));
    }
    let values = if width == 2 {
        payload
            .chunks_exact(2)
            .map(|c| Bf16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect()
    } else {
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        round_slice(&floats).map_err(|e| CliError::Input(e.to_string()))?
    };
    if let Some(i) = values.iter().position(|v: &Bf16| !v.is_finite()) {
        return Err(bad(&format!("non-finite value at index {i}")));
    }
    Ok(RawTensor { dims, values })
}

pub fn to_bytes_bf16(dims: &[u32], values: &[Bf16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * dims.len() + 2 * values.len());
    out.extend_from_slice(&MAGIC_BF16);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

pub fn to_bytes_f32(dims: &[u32], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(&MAGIC_F32);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read(path: &Path) -> Result<RawTensor, CliError> {
    parse(&std::fs::read(path).map_err(|e| CliError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_widths() {
        let vals = [1.0f32, -2.5, 0.0, 3.25, 1e-3, 7.0];
        let t = parse(&to_bytes_f32(&[2, 3], &vals)).unwrap();
        assert_eq!(t.dims, vec![2, 3]);
        assert_eq!(t.matrix_shape(), (2, 3));
        let again = parse(&to_bytes_bf16(&t.dims, &t.values)).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse(b"XXXX\x01\x01\x00\x00\x00\x00\x00").is_err());
        assert!(parse(&to_bytes_f32(&[2], &[1.0, f32::NAN])).is_err());
        let mut short = to_bytes_bf16(&[3], &[Bf16::ONE; 3]);
        short.pop();
        assert!(parse(&short).is_err());
    }
}
