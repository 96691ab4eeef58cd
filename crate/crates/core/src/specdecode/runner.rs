//! Draft/verify generation loops and the autoregressive baseline.

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::kv::{KvMode, KvScratch, KvStore};
use super::model::{argmax, softmax, ModelWeights, TensorRole, TinyLM};
use super::verify::{greedy_verify, sample_index, verify_and_accept};
use crate::container::{encode_tensor, DraftConfig, ExponentMode, View};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::selection::{calibration_norms, select_topk_per_row, wanda_scores, CalibrationNorms, KeepBitmap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Softmax sampling at the given temperature.
    Sampled { temperature: f64 },
}

impl Sampling {
    fn distribution(&self, logits: &[f32]) -> Vec<f64> {
        match *self {
            Sampling::Greedy => softmax(logits, 1.0),
            Sampling::Sampled { temperature } => softmax(logits, temperature),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Sampling::Sampled { temperature } if !(temperature > 0.0 && temperature.is_finite()) => Err(
                Error::InvalidParameter(format!("temperature {temperature} must be positive")),
            ),
            _ => Ok(()),
        }
    }
}

/// Per-input-channel activation norms for each linear tensor, in order.
pub fn calibrate(model: &TinyLM) -> Result<Vec<CalibrationNorms>> {
    model
        .calibration_activations()?
        .iter()
        .map(|(_, acts)| calibration_norms(acts))
        .collect()
}

/// Both views of a model under one draft configuration, with the bit
/// counts each pass reads.
#[derive(Debug, Clone)]
pub struct SpecEngine {
    pub config: DraftConfig,
    pub draft: ModelWeights,
    pub target: ModelWeights,
    /// Bits a draft forward reads from the weights.
    pub draft_weight_bits: u64,
    /// Bits a target forward reads from the weights.
    pub target_weight_bits: u64,
    /// Plain BF16 weight bits.
    pub baseline_weight_bits: u64,
    /// Linear-layer bits only, BF16 over speculation.
    pub linear_compression_ratio: f64,
}

impl SpecEngine {
    pub fn build(model: &TinyLM, norms: &[CalibrationNorms], config: DraftConfig) -> Result<Self> {
        config.validate()?;
        let codec = config.weight_codec();
        let keep = config.weight_keep_fraction();
        let mut draft_tensors = Vec::with_capacity(model.tensors.len());
        let mut target_tensors = Vec::with_capacity(model.tensors.len());
        let mut norms = norms.iter();
        let (mut draft_bits, mut target_bits, mut raw_bits) = (0u64, 0u64, 0u64);
        let (mut linear_raw, mut linear_spec) = (0u64, 0u64);
        for t in &model.tensors {
            let bf16_bits = 16 * t.numel() as u64;
            raw_bits += bf16_bits;
            if t.role != TensorRole::Linear {
                draft_tensors.push(t.values.clone());
                target_tensors.push(t.values.clone());
                draft_bits += bf16_bits;
                target_bits += bf16_bits;
                continue;
            }
            let norm = norms.next().ok_or(Error::EmptyInput("calibration norms"))?;
            let w = Matrix::new(t.rows, t.cols, t.values.iter().map(|v| v.to_f32()).collect())?;
            let bitmap = if keep >= 1.0 {
                KeepBitmap::all_kept(t.numel())
            } else {
                select_topk_per_row(&wanda_scores(&w, norm)?, keep)?
            };
            let c = encode_tensor(&t.values, &[t.rows as u32, t.cols as u32], &bitmap, codec)?;
            let stats = c.compression_stats();
            draft_bits += stats.spec_bits;
            target_bits += stats.total_bits;
            linear_raw += bf16_bits;
            linear_spec += stats.spec_bits;
            draft_tensors.push(c.decode_draft()?);
            target_tensors.push(match config.mode {
                ExponentMode::Unary => t.values.clone(),
                ExponentMode::Mx => c.decode_target()?,
            });
        }
        let cfg = &model.config;
        Ok(SpecEngine {
            config,
            draft: ModelWeights::from_tensors(cfg, draft_tensors.iter().map(Vec::as_slice))?,
            target: ModelWeights::from_tensors(cfg, target_tensors.iter().map(Vec::as_slice))?,
            draft_weight_bits: draft_bits,
            target_weight_bits: target_bits,
            baseline_weight_bits: raw_bits,
            linear_compression_ratio: linear_raw as f64 / linear_spec as f64,
        })
    }

    pub fn from_model(model: &TinyLM, config: DraftConfig) -> Result<Self> {
        Self::build(model, &calibrate(model)?, config)
    }

    pub fn draft_kv_mode(&self) -> KvMode {
        KvMode::Encoded {
            codec: self.config.kv_codec(),
            keep_fraction: self.config.kv_keep_fraction(),
            view: View::Draft,
        }
    }

    /// Lossless targets keep plain rows; MX targets read the lossy view.
    pub fn target_kv_mode(&self) -> KvMode {
        match self.config.mode {
            ExponentMode::Unary => KvMode::Raw,
            ExponentMode::Mx => KvMode::Encoded {
                codec: self.config.kv_codec(),
                keep_fraction: self.config.kv_keep_fraction(),
                view: View::Target,
            },
        }
    }

    /// Draft `gamma` tokens after `pending`, returning them with the
    /// distribution each was drawn from.
    pub fn draft_generate(
        &self,
        kv: &KvStore,
        pending: u32,
        gamma: usize,
        sampling: Sampling,
        rng: &mut SplitMix64,
    ) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
        if gamma == 0 {
            return Err(Error::EmptySpeculation);
        }
        let mut scratch = KvScratch::new(&self.draft.config);
        let mut tokens = Vec::with_capacity(gamma);
        let mut dists = Vec::with_capacity(gamma);
        let mut input = pending;
        for _ in 0..gamma {
            let logits = self.draft.forward(kv, &mut scratch, &[input])?.remove(0);
            let q = sampling.distribution(&logits);
            input = match sampling {
                Sampling::Greedy => argmax(&logits),
                Sampling::Sampled { .. } => sample_index(&q, rng),
            };
            tokens.push(input);
            dists.push(q);
        }
        Ok((tokens, dists))
    }

    /// Generate `max_tokens` tokens after `prompt`.
    pub fn run(&self, prompt: &[u32], max_tokens: usize, sampling: Sampling, seed: u64) -> Result<SpecOutput> {
        sampling.validate()?;
        let (&last, head) = prompt.split_last().ok_or(Error::EmptyInput("prompt"))?;
        let cfg = &self.target.config;
        let gamma = self.config.gamma;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut target_kv = KvStore::new(cfg, self.target_kv_mode());
        let mut draft_kv = KvStore::new(cfg, self.draft_kv_mode());
        let mut scratch = KvScratch::new(cfg);
        self.target.forward(&target_kv, &mut scratch, head)?;
        target_kv.commit(&scratch, head.len())?;
        draft_kv.commit(&scratch, head.len())?;

        let mut stats = SpecRunStats::new(gamma);
        let mut out = Vec::with_capacity(max_tokens + gamma + 1);
        let mut pending = last;
        while out.len() < max_tokens {
            let (drafted, q) = self.draft_generate(&draft_kv, pending, gamma, sampling, &mut rng)?;

            scratch.clear();
            let mut inputs = Vec::with_capacity(gamma + 1);
            inputs.push(pending);
            inputs.extend_from_slice(&drafted);
            let logits = self.target.forward(&target_kv, &mut scratch, &inputs)?;
            let (n, next) = match sampling {
                Sampling::Greedy => {
                    let picks: Vec<u32> = logits.iter().map(|l| argmax(l)).collect();
                    greedy_verify(&picks, &drafted)?
                }
                Sampling::Sampled { .. } => {
                    let p: Vec<Vec<f64>> = logits.iter().map(|l| sampling.distribution(l)).collect();
                    verify_and_accept(&p, &q, &drafted, &mut rng)?
                }
            };

            stats.record_round(
                n,
                gamma as u64 * (self.draft_weight_bits + draft_kv.spec_bits()),
                self.target_weight_bits + draft_kv.total_bits(),
            );
            target_kv.commit(&scratch, n + 1)?;
            draft_kv.commit(&scratch, n + 1)?;
            out.extend_from_slice(&drafted[..n]);
            out.push(next);
            pending = next;
        }
        out.truncate(max_tokens);
        stats.tokens_generated = out.len() as u64;
        Ok(SpecOutput { tokens: out, stats })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecOutput {
    pub tokens: Vec<u32>,
    pub stats: SpecRunStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecRunStats {
    pub gamma: usize,
    pub rounds: u64,
    pub tokens_generated: u64,
    /// Rounds by number of accepted drafted tokens, `0..=gamma`.
    pub accepted_histogram: Vec<u64>,
    /// Summed over all rounds.
    pub bytes_draft: f64,
    pub bytes_target: f64,
}

impl SpecRunStats {
    pub fn new(gamma: usize) -> Self {
        SpecRunStats {
            gamma,
            rounds: 0,
            tokens_generated: 0,
            accepted_histogram: vec![0; gamma + 1],
            bytes_draft: 0.0,
            bytes_target: 0.0,
        }
    }

    fn record_round(&mut self, accepted: usize, draft_bits: u64, target_bits: u64) {
        self.rounds += 1;
        self.accepted_histogram[accepted] += 1;
        self.bytes_draft += draft_bits as f64 / 8.0;
        self.bytes_target += target_bits as f64 / 8.0;
    }

    pub fn accepted_total(&self) -> u64 {
        self.accepted_histogram.iter().enumerate().map(|(n, &c)| n as u64 * c).sum()
    }

    /// Mean accepted drafted tokens per round.
    pub fn mean_accepted(&self) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        self.accepted_total() as f64 / self.rounds as f64
    }

    pub fn alpha(&self) -> f64 {
        self.mean_accepted() / self.gamma as f64
    }

    pub fn bytes_draft_per_round(&self) -> f64 {
        self.bytes_draft / self.rounds.max(1) as f64
    }

    pub fn bytes_target_per_round(&self) -> f64 {
        self.bytes_target / self.rounds.max(1) as f64
    }

    /// Combine runs that share `gamma`.
    pub fn merge(&mut self, other: &SpecRunStats) {
        assert_eq!(self.gamma, other.gamma);
        self.rounds += other.rounds;
        self.tokens_generated += other.tokens_generated;
        for (a, b) in self.accepted_histogram.iter_mut().zip(&other.accepted_histogram) {
            *a += b;
        }
        self.bytes_draft += other.bytes_draft;
        self.bytes_target += other.bytes_target;
    }
}

pub fn run_speculative(
    model: &TinyLM,
    config: DraftConfig,
    prompt: &[u32],
    max_tokens: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<SpecOutput> {
    SpecEngine::from_model(model, config)?.run(prompt, max_tokens, sampling, seed)
}

/// One-token-at-a-time generation from plain BF16 weights and KV.
pub fn run_autoregressive(
    model: &TinyLM,
    prompt: &[u32],
    max_tokens: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<u32>> {
    autoregressive_with(&model.target_weights(), prompt, max_tokens, sampling, seed)
}

/// As [`run_autoregressive`] with weights already widened.
pub fn autoregressive_with(
    weights: &ModelWeights,
    prompt: &[u32],
    max_tokens: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<u32>> {
    sampling.validate()?;
    let (&last, head) = prompt.split_last().ok_or(Error::EmptyInput("prompt"))?;
    let cfg = &weights.config;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut kv = KvStore::raw(cfg);
    let mut scratch = KvScratch::new(cfg);
    weights.forward(&kv, &mut scratch, head)?;
    kv.commit(&scratch, head.len())?;
    let mut out = Vec::with_capacity(max_tokens);
    let mut pending = last;
    while out.len() < max_tokens {
        scratch.clear();
        let logits = weights.forward(&kv, &mut scratch, &[pending])?.remove(0);
        kv.commit(&scratch, 1)?;
        pending = match sampling {
            Sampling::Greedy => argmax(&logits),
            Sampling::Sampled { .. } => sample_index(&sampling.distribution(&logits), &mut rng),
        };
        out.push(pending);
    }
    Ok(out)
}
