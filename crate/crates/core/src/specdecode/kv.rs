//! Key/value cache stores.
//!
//! A store holds one entry per committed position and layer. Entries are
//! plain BF16 rows or per-token containers read through a view. Rows
//! computed during a forward pass go to a [`KvScratch`] first and only
//! enter the store through [`KvStore::commit`].

use super::model::ModelConfig;
use crate::bf16::{round_slice, Bf16};
use crate::container::{encode_tensor, CassandraTensor, TensorCodec, View};
use crate::error::{Error, Result};
use crate::selection::kv_select_per_token;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KvMode {
    Raw,
    /// Per-token magnitude selection, encoded and read through `view`.
    Encoded {
        codec: TensorCodec,
        keep_fraction: f64,
        view: View,
    },
}

/// One K or V vector at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRow {
    /// BF16-rounded row as the target model computed it.
    pub raw: Vec<Bf16>,
    pub container: Option<CassandraTensor>,
    /// What attention actually reads.
    pub widened: Vec<f32>,
}

impl KvRow {
    fn build(raw: Vec<Bf16>, mode: &KvMode) -> Result<Self> {
        match *mode {
            KvMode::Raw => Ok(KvRow {
                widened: raw.iter().map(|v| v.to_f32()).collect(),
                raw,
                container: None,
            }),
            KvMode::Encoded {
                codec,
                keep_fraction,
                view,
            } => {
                let wide: Vec<f32> = raw.iter().map(|v| v.to_f32()).collect();
                let bitmap = kv_select_per_token(&wide, keep_fraction)?;
                let t = encode_tensor(&raw, &[raw.len() as u32], &bitmap, codec)?;
                let (decoded, _) = t.decode_with_report(view)?;
                Ok(KvRow {
                    widened: decoded.iter().map(|v| v.to_f32()).collect(),
                    raw,
                    container: Some(t),
                })
            }
        }
    }

    /// Bits a draft pass and a target pass read for this row.
    fn bits(&self) -> (u64, u64) {
        match &self.container {
            None => {
                let b = 16 * self.raw.len() as u64;
                (b, b)
            }
            Some(t) => (t.view_bits(View::Draft), t.view_bits(View::Target)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    keys: Vec<KvRow>,
    values: Vec<KvRow>,
}

impl LayerKv {
    pub fn keys(&self) -> impl Iterator<Item = &[f32]> {
        self.keys.iter().map(|r| r.widened.as_slice())
    }

    pub fn values(&self) -> impl Iterator<Item = &[f32]> {
        self.values.iter().map(|r| r.widened.as_slice())
    }

    pub fn key_rows(&self) -> &[KvRow] {
        &self.keys
    }

    pub fn value_rows(&self) -> &[KvRow] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvStore {
    mode: KvMode,
    layers: Vec<LayerKv>,
    len: usize,
    spec_bits: u64,
    total_bits: u64,
}

impl KvStore {
    pub fn new(config: &ModelConfig, mode: KvMode) -> Self {
        KvStore {
            mode,
            layers: vec![LayerKv::default(); config.layers],
            len: 0,
            spec_bits: 0,
            total_bits: 0,
        }
    }

    pub fn raw(config: &ModelConfig) -> Self {
        Self::new(config, KvMode::Raw)
    }

    pub fn mode(&self) -> &KvMode {
        &self.mode
    }

    /// Committed positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Bits a draft pass reads to attend over the whole store.
    pub fn spec_bits(&self) -> u64 {
        self.spec_bits
    }

    /// Bits a target pass reads to attend over the whole store.
    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    /// Round freshly computed K and V to BF16 and store them the way this
    /// cache would.
    pub fn prepare_row(&self, k: &[f32], v: &[f32]) -> Result<(KvRow, KvRow)> {
        Ok((
            KvRow::build(round_slice(k)?, &self.mode)?,
            KvRow::build(round_slice(v)?, &self.mode)?,
        ))
    }

    /// Append the first `count` scratch positions. Rows produced under a
    /// different mode are re-encoded from their raw BF16 values.
    pub fn commit(&mut self, scratch: &KvScratch, count: usize) -> Result<()> {
        if count > scratch.len() {
            return Err(Error::InvalidParameter(format!(
                "cannot commit {count} of {} scratch positions",
                scratch.len()
            )));
        }
        let same = scratch.mode == Some(self.mode);
        for position in &scratch.positions[..count] {
            for (layer, (k, v)) in self.layers.iter_mut().zip(position) {
                for (row, dest) in [(k, &mut layer.keys), (v, &mut layer.values)] {
                    let row = if same {
                        row.clone()
                    } else {
                        KvRow::build(row.raw.clone(), &self.mode)?
                    };
                    let (s, t) = row.bits();
                    self.spec_bits += s;
                    self.total_bits += t;
                    dest.push(row);
                }
            }
        }
        self.len += count;
        Ok(())
    }
}

/// Uncommitted K/V rows from the current pass.
#[derive(Debug, Clone, PartialEq)]
pub struct KvScratch {
    layers: usize,
    mode: Option<KvMode>,
    positions: Vec<Vec<(KvRow, KvRow)>>,
}

impl KvScratch {
    pub fn new(config: &ModelConfig) -> Self {
        KvScratch {
            layers: config.layers,
            mode: None,
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn clear(&mut self) {
        self.positions.clear();
        self.mode = None;
    }

    pub fn keys(&self, l: usize) -> impl Iterator<Item = &[f32]> {
        self.positions.iter().map(move |p| p[l].0.widened.as_slice())
    }

    pub fn values(&self, l: usize) -> impl Iterator<Item = &[f32]> {
        self.positions.iter().map(move |p| p[l].1.widened.as_slice())
    }

    pub(crate) fn push(&mut self, rows: Vec<(KvRow, KvRow)>, mode: KvMode) {
        debug_assert_eq!(rows.len(), self.layers);
        debug_assert!(self.mode.is_none_or(|m| m == mode));
        self.mode = Some(mode);
        self.positions.push(rows);
    }
}
