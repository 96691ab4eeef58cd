//! A deterministic toy transformer.
//!
//! Single-head causal attention, ReLU feed-forward, RMS normalization and
//! a head tied to the embedding. Weights are BF16; inference widens them
//! to `f32`. Each position is computed independently in a fixed operation
//! order, so feeding a context one token at a time or all at once gives
//! bit-identical logits.

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::kv::{KvScratch, KvStore};
use crate::bf16::Bf16;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const RMS_EPS: f32 = 1e-5;
const INIT_RANGE: f32 = 0.1;
pub const CALIBRATION_SAMPLES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            d_model: 64,
            layers: 2,
            ffn_mult: 4,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.ffn_mult == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidParameter(format!("model dimensions must be non-zero: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Norm,
    /// A projection `y = W x`; rows are outputs, columns inputs.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub role: TensorRole,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Bf16>,
}

impl WeightTensor {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// The BF16 master copy of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<WeightTensor>,
}

/// Tensor shapes in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, TensorRole, usize, usize)> {
    let d = cfg.d_model;
    let h = cfg.hidden();
    let mut out = vec![("embedding".to_string(), TensorRole::Embedding, cfg.vocab, d)];
    for l in 0..cfg.layers {
        out.push((format!("layer{l}.attn_norm"), TensorRole::Norm, 1, d));
        for name in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layer{l}.{name}"), TensorRole::Linear, d, d));
        }
        out.push((format!("layer{l}.ffn_norm"), TensorRole::Norm, 1, d));
        out.push((format!("layer{l}.w1"), TensorRole::Linear, h, d));
        out.push((format!("layer{l}.w2"), TensorRole::Linear, d, h));
    }
    out.push(("final_norm".to_string(), TensorRole::Norm, 1, d));
    out
}

/// Uniform draw in `[-0.1, 0.1]` rounded to BF16, nudged toward zero if
/// rounding stepped outside the range.
fn draw_weight(rng: &mut SplitMix64) -> Bf16 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let x = (-(INIT_RANGE as f64) + 2.0 * INIT_RANGE as f64 * u) as f32;
    let b = Bf16::from_f32(x).expect("finite draw");
    if b.to_f32().abs() > INIT_RANGE {
        Bf16::from_bits(b.to_bits() - 1)
    } else {
        b
    }
}

impl TinyLM {
    pub fn init(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let tensors = layout(&config)
            .into_iter()
            .map(|(name, role, rows, cols)| WeightTensor {
                name,
                role,
                rows,
                cols,
                values: (0..rows * cols).map(|_| draw_weight(&mut rng)).collect(),
            })
            .collect();
        Ok(TinyLM { config, seed, tensors })
    }

    pub fn weight_count(&self) -> usize {
        self.tensors.iter().map(WeightTensor::numel).sum()
    }

    /// Full-precision execution weights.
    pub fn target_weights(&self) -> ModelWeights {
        ModelWeights::from_tensors(&self.config, self.tensors.iter().map(|t| t.values.as_slice()))
            .expect("layout matches config")
    }

    /// Input activations of every linear layer over a seeded random token
    /// sequence, in tensor order. One row per token.
    pub fn calibration_activations(&self) -> Result<Vec<(String, Matrix)>> {
        let mut rng = SplitMix64::seed_from_u64(self.seed ^ 0xCA11_B8A7_E000_0000);
        let samples = CALIBRATION_SAMPLES.min(self.config.max_seq_len);
        let tokens: Vec<u32> = (0..samples)
            .map(|_| (rng.next_u64() % self.config.vocab as u64) as u32)
            .collect();
        let weights = self.target_weights();
        let kv = KvStore::raw(&self.config);
        let mut scratch = KvScratch::new(&self.config);
        let mut rec = ActivationRecorder::new(self.config.layers);
        weights.forward_inner(&kv, &mut scratch, &tokens, Some(&mut rec))?;
        let mut out = Vec::new();
        for (l, layer) in rec.layers.into_iter().enumerate() {
            let [attn_in, attn_out, ffn_in, ffn_hidden] = layer.map(|rows| Matrix::from_rows(&rows).expect("uniform rows"));
            for name in ["wq", "wk", "wv"] {
                out.push((format!("layer{l}.{name}"), attn_in.clone()));
            }
            out.push((format!("layer{l}.wo"), attn_out));
            out.push((format!("layer{l}.w1"), ffn_in));
            out.push((format!("layer{l}.w2"), ffn_hidden));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Widened weights ready for inference, either target or draft view.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

#[derive(Debug, Default)]
pub(crate) struct ActivationRecorder {
    /// Per layer: inputs of the QKV projections, the output projection,
    /// the first and the second feed-forward matrix.
    layers: Vec<[Vec<Vec<f32>>; 4]>,
}

impl ActivationRecorder {
    fn new(layers: usize) -> Self {
        ActivationRecorder {
            layers: (0..layers).map(|_| Default::default()).collect(),
        }
    }
}

fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ModelWeights {
    /// Assemble from flat tensors in storage order.
    pub fn from_tensors<'a>(cfg: &ModelConfig, mut tensors: impl Iterator<Item = &'a [Bf16]>) -> Result<Self> {
        let d = cfg.d_model;
        let h = cfg.hidden();
        let mut next = |rows: usize, cols: usize| -> Result<Matrix> {
            let t = tensors.next().ok_or(Error::EmptyInput("model tensors"))?;
            Matrix::new(rows, cols, t.iter().map(|v| v.to_f32()).collect())
        };
        let embedding = next(cfg.vocab, d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerWeights {
                attn_norm: next(1, d)?.into_vec(),
                wq: next(d, d)?,
                wk: next(d, d)?,
                wv: next(d, d)?,
                wo: next(d, d)?,
                ffn_norm: next(1, d)?.into_vec(),
                w1: next(h, d)?,
                w2: next(d, h)?,
            });
        }
        let final_norm = next(1, d)?.into_vec();
        Ok(ModelWeights {
            config: *cfg,
            embedding,
            layers,
            final_norm,
        })
    }

    /// Logits for each of `tokens`, which continue the context held in `kv`
    /// and `scratch`. New K/V rows are appended to `scratch`, not committed.
    pub fn forward(&self, kv: &KvStore, scratch: &mut KvScratch, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        self.forward_inner(kv, scratch, tokens, None)
    }

    pub(crate) fn forward_inner(
        &self,
        kv: &KvStore,
        scratch: &mut KvScratch,
        tokens: &[u32],
        mut rec: Option<&mut ActivationRecorder>,
    ) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.config;
        let needed = kv.len() + scratch.len() + tokens.len();
        if needed > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                needed,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let scale = 1.0 / (d as f32).sqrt();
        let mut normed = vec![0f32; d];
        let mut q = vec![0f32; d];
        let mut k = vec![0f32; d];
        let mut v = vec![0f32; d];
        let mut attn = vec![0f32; d];
        let mut proj = vec![0f32; d];
        let mut hidden = vec![0f32; cfg.hidden()];
        let mut out = Vec::with_capacity(tokens.len());

        for &token in tokens {
            if token as usize >= cfg.vocab {
                return Err(Error::TokenOutOfRange { token, vocab: cfg.vocab });
            }
            let mut x = self.embedding.row(token as usize).to_vec();
            let mut new_rows = Vec::with_capacity(cfg.layers);
            for (l, layer) in self.layers.iter().enumerate() {
                rms_norm(&x, &layer.attn_norm, &mut normed);
                if let Some(r) = rec.as_deref_mut() {
                    r.layers[l][0].push(normed.clone());
                }
                layer.wq.matvec_into(&normed, &mut q);
                layer.wk.matvec_into(&normed, &mut k);
                layer.wv.matvec_into(&normed, &mut v);
                let (k_row, v_row) = kv.prepare_row(&k, &v)?;

                // causal attention over committed rows, earlier scratch rows, then this row
                let keys = kv.layer(l).keys().chain(scratch.keys(l)).chain(std::iter::once(k_row.widened.as_slice()));
                let scores: Vec<f32> = keys.map(|key| dot(&q, key) * scale).collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f32 = exps.iter().sum();
                attn.iter_mut().for_each(|a| *a = 0.0);
                let values = kv.layer(l).values().chain(scratch.values(l)).chain(std::iter::once(v_row.widened.as_slice()));
                for (w, val) in exps.iter().zip(values) {
                    let p = w / denom;
                    for (a, vv) in attn.iter_mut().zip(val) {
                        *a += p * vv;
                    }
                }
                layer.wo.matvec_into(&attn, &mut proj);
                for (xi, p) in x.iter_mut().zip(&proj) {
                    *xi += p;
                }

                rms_norm(&x, &layer.ffn_norm, &mut normed);
                layer.w1.matvec_into(&normed, &mut hidden);
                hidden.iter_mut().for_each(|h| *h = h.max(0.0));
                if let Some(r) = rec.as_deref_mut() {
                    let slot = &mut r.layers[l];
                    slot[1].push(attn.clone());
                    slot[2].push(normed.clone());
                    slot[3].push(hidden.clone());
                }
                layer.w2.matvec_into(&hidden, &mut proj);
                for (xi, p) in x.iter_mut().zip(&proj) {
                    *xi += p;
                }
                new_rows.push((k_row, v_row));
            }
            scratch.push(new_rows, *kv.mode());
            rms_norm(&x, &self.final_norm, &mut normed);
            out.push(self.embedding.matvec(&normed));
        }
        Ok(out)
    }
}

pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Softmax of `logits / temperature` in `f64`.
pub fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            layers: 2,
            ffn_mult: 2,
            max_seq_len: 32,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = TinyLM::init(7, ModelConfig::default()).unwrap();
        let b = TinyLM::init(7, ModelConfig::default()).unwrap();
        let c = TinyLM::init(8, ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, c.tensors);
        for t in &a.tensors {
            assert!(t.values.iter().all(|v| v.to_f32().abs() <= 0.1), "{}", t.name);
        }
        assert_eq!(a.tensors.len(), 1 + 2 * 8 + 1);
    }

    #[test]
    fn zero_dims_rejected() {
        let cfg = ModelConfig {
            d_model: 0,
            ..ModelConfig::default()
        };
        assert!(TinyLM::init(1, cfg).is_err());
    }

    #[test]
    fn single_token_depends_only_on_token() {
        let m = TinyLM::init(3, small()).unwrap();
        let w = m.target_weights();
        let kv = KvStore::raw(&m.config);
        let a = w.forward(&kv, &mut KvScratch::new(&m.config), &[5]).unwrap();
        let b = w.forward(&kv, &mut KvScratch::new(&m.config), &[5]).unwrap();
        let c = w.forward(&kv, &mut KvScratch::new(&m.config), &[6]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn incremental_matches_batched() {
        let m = TinyLM::init(11, small()).unwrap();
        let w = m.target_weights();
        let kv = KvStore::raw(&m.config);
        let ctx = [1u32, 4, 9, 2, 2, 15, 0];
        let batched = w.forward(&kv, &mut KvScratch::new(&m.config), &ctx).unwrap();
        let mut scratch = KvScratch::new(&m.config);
        let stepwise: Vec<Vec<f32>> = ctx
            .iter()
            .map(|&t| w.forward(&kv, &mut scratch, &[t]).unwrap().remove(0))
            .collect();
        for (a, b) in batched.iter().zip(&stepwise) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
        assert_eq!(batched, stepwise);
    }

    #[test]
    fn committed_context_matches_scratch_context() {
        let m = TinyLM::init(12, small()).unwrap();
        let w = m.target_weights();
        let ctx = [3u32, 1, 4, 1, 5];
        let all = w.forward(&KvStore::raw(&m.config), &mut KvScratch::new(&m.config), &ctx).unwrap();
        let mut kv = KvStore::raw(&m.config);
        let mut scratch = KvScratch::new(&m.config);
        w.forward(&kv, &mut scratch, &ctx[..3]).unwrap();
        kv.commit(&scratch, 3).unwrap();
        let tail = w.forward(&kv, &mut KvScratch::new(&m.config), &ctx[3..]).unwrap();
        assert_eq!(&all[3..], &tail[..]);
    }

    #[test]
    fn context_overflow_and_bad_token() {
        let m = TinyLM::init(1, small()).unwrap();
        let w = m.target_weights();
        let kv = KvStore::raw(&m.config);
        let long = vec![1u32; 33];
        assert!(matches!(
            w.forward(&kv, &mut KvScratch::new(&m.config), &long),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(matches!(
            w.forward(&kv, &mut KvScratch::new(&m.config), &[16]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = TinyLM::init(5, ModelConfig::default()).unwrap();
        let w = m.target_weights();
        let logits = w
            .forward(&KvStore::raw(&m.config), &mut KvScratch::new(&m.config), &[1, 2, 3, 4])
            .unwrap();
        for row in logits {
            for t in [1.0, 0.1, 0.01] {
                let p = softmax(&row, t);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn calibration_covers_every_linear() {
        let m = TinyLM::init(2, small()).unwrap();
        let acts = m.calibration_activations().unwrap();
        let linears: Vec<&WeightTensor> = m.tensors.iter().filter(|t| t.role == TensorRole::Linear).collect();
        assert_eq!(acts.len(), linears.len());
        for ((name, a), t) in acts.iter().zip(linears) {
            assert_eq!(name, &t.name);
            assert_eq!(a.cols(), t.cols);
            assert_eq!(a.rows(), 32);
        }
    }
}
