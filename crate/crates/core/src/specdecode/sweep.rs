//! Acceptance rate against compression ratio over a set of draft configs.

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;

use super::model::TinyLM;
use super::runner::{Sampling, SpecEngine, SpecRunStats};
use crate::container::{DraftConfig, ExponentMode};
use crate::error::Result;
use crate::selection::CalibrationNorms;

/// Which compression knobs a sweep point exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Uncompressed,
    /// Pruning only.
    Vp,
    /// Mantissa truncation only.
    Mt,
    VpMt,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Uncompressed => "none",
            Family::Vp => "VP",
            Family::Mt => "MT",
            Family::VpMt => "VP+MT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub family: Family,
    pub config: DraftConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub family: Family,
    pub config: DraftConfig,
    /// `16 / ((1 - p)(16 - t))` from the weight settings alone.
    pub nominal_ratio: f64,
    /// BF16 bits over speculation bits actually stored for linear weights.
    pub measured_ratio: f64,
    pub alpha: f64,
    pub stats: SpecRunStats,
}

/// The uncompressed point, pruning-only and truncation-only series, and
/// the joint prune × truncate grid.
pub fn tradeoff_grid(mode: ExponentMode, gamma: usize) -> Vec<TradeoffPoint> {
    let point = |family, p: f64, t: u8| TradeoffPoint {
        family,
        config: DraftConfig::tied(mode, p, t, gamma),
    };
    let mut out = vec![point(Family::Uncompressed, 0.0, 0)];
    for i in 1..=7 {
        out.push(point(Family::Vp, i as f64 / 10.0, 0));
    }
    for t in 1..=6 {
        out.push(point(Family::Mt, 0.0, t));
    }
    for p in [0.3, 0.4, 0.5, 0.6] {
        for t in 0..=5 {
            out.push(point(Family::VpMt, p, t));
        }
    }
    out
}

/// `count` prompts of `len` tokens each.
pub fn random_prompts(seed: u64, count: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| (rng.next_u64() % vocab as u64) as u32).collect())
        .collect()
}

/// Run every prompt independently and merge the statistics. Prompt `i`
/// uses seed `seed + i`, so the result does not depend on prompt order
/// beyond that pairing.
pub fn evaluate(
    engine: &SpecEngine,
    prompts: &[Vec<u32>],
    max_tokens: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<SpecRunStats> {
    let mut total = SpecRunStats::new(engine.config.gamma);
    for (i, prompt) in prompts.iter().enumerate() {
        let out = engine.run(prompt, max_tokens, sampling, seed.wrapping_add(i as u64))?;
        total.merge(&out.stats);
    }
    Ok(total)
}

pub fn sweep_tradeoff(
    model: &TinyLM,
    norms: &[CalibrationNorms],
    points: &[TradeoffPoint],
    prompts: &[Vec<u32>],
    max_tokens: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<TradeoffRow>> {
    points
        .par_iter()
        .map(|pt| {
            let engine = SpecEngine::build(model, norms, pt.config)?;
            let stats = evaluate(&engine, prompts, max_tokens, sampling, seed)?;
            let c = pt.config;
            Ok(TradeoffRow {
                family: pt.family,
                config: c,
                nominal_ratio: 16.0 / ((1.0 - c.weight_prune) * (16.0 - c.weight_truncate as f64)),
                measured_ratio: engine.linear_compression_ratio,
                alpha: stats.alpha(),
                stats,
            })
        })
        .collect()
}
