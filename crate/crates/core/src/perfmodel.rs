//! Analytical performance layer: the draft-config objective, grid search
//! over draft configs, a memory-bound speedup estimate and exponent
//! entropy reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bf16::Bf16;
use crate::container::{DraftConfig, ExponentMode};
use crate::error::{Error, Result};
use crate::expcodec::{avg_unary_bits, shannon_entropy, UnaryCodebook};
use crate::selection::CalibrationNorms;
use crate::specdecode::{evaluate, Sampling, SpecEngine, TinyLM};

/// Bit width of an uncompressed element.
pub const BF16_BITS: f64 = 16.0;
pub const DEFAULT_OVERHEAD: f64 = 0.05;
pub const DEFAULT_DEV_PROMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub label: String,
    /// Bytes per second.
    pub memory_bandwidth: f64,
}

impl HardwareProfile {
    pub fn new(label: impl Into<String>, memory_bandwidth: f64) -> Result<Self> {
        if !(memory_bandwidth > 0.0 && memory_bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "memory bandwidth {memory_bandwidth} must be positive"
            )));
        }
        Ok(HardwareProfile {
            label: label.into(),
            memory_bandwidth,
        })
    }
}

/// Acceptance rate per speculation bit:
/// `alpha / (S_w (1 - w_p)(B - w_t) + S_kv (1 - kv_p)(B - kv_t))`.
pub fn objective_j(alpha: f64, s_w: f64, s_kv: f64, cfg: &DraftConfig, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} not in [0, 1]")));
    }
    let denom = s_w * (1.0 - cfg.weight_prune) * (b - cfg.weight_truncate as f64)
        + s_kv * (1.0 - cfg.kv_prune) * (b - cfg.kv_truncate as f64);
    if denom <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(alpha / denom)
}

/// Same objective over bits actually read by the draft pass, including
/// bitmap and coded exponents.
pub fn objective_j_measured(alpha: f64, draft_weight_bits: f64, draft_kv_bits: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} not in [0, 1]")));
    }
    let denom = draft_weight_bits + draft_kv_bits;
    if denom <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(alpha / denom)
}

/// Prune 30–60% in steps of 10% and truncate 0–5 bits, independently for
/// weights and KV.
pub fn search_grid(mode: ExponentMode, gamma: usize) -> Vec<DraftConfig> {
    let prunes = [0.3, 0.4, 0.5, 0.6];
    let mut out = Vec::with_capacity(576);
    for &weight_prune in &prunes {
        for &kv_prune in &prunes {
            for weight_truncate in 0..=5 {
                for kv_truncate in 0..=5 {
                    out.push(DraftConfig {
                        mode,
                        weight_prune,
                        kv_prune,
                        weight_truncate,
                        kv_truncate,
                        gamma,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchOptions {
    pub max_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for GridSearchOptions {
    fn default() -> Self {
        GridSearchOptions {
            max_tokens: 32,
            sampling: Sampling::Greedy,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: DraftConfig,
    pub alpha: f64,
    /// Weight bytes at BF16.
    pub s_w: f64,
    /// KV bytes at BF16 over the mean attended context.
    pub s_kv: f64,
    pub objective: f64,
    pub measured_objective: f64,
    /// Stored size of the weights in this configuration, in bytes.
    pub compressed_bytes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: usize,
    pub rows: Vec<GridRow>,
}

impl GridSearchResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }
}

/// Index of the best row: highest objective, then smaller stored size,
/// then earlier position.
pub fn argmax_rows(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &rows[b];
                if r.objective > cur.objective
                    || (r.objective == cur.objective && r.compressed_bytes < cur.compressed_bytes)
                {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

fn weight_key(c: &DraftConfig) -> (u64, u8) {
    (c.weight_prune.to_bits(), c.weight_truncate)
}

/// Measure acceptance for every config on the dev prompts and pick the
/// best by the objective. Configs sharing weight settings share one set of
/// draft weights.
pub fn grid_search(
    model: &TinyLM,
    norms: &[CalibrationNorms],
    prompts: &[Vec<u32>],
    grid: &[DraftConfig],
    opts: &GridSearchOptions,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("grid"));
    }
    if prompts.is_empty() {
        return Err(Error::EmptyInput("dev prompts"));
    }
    let mut bases: HashMap<(u64, u8), SpecEngine> = HashMap::new();
    for c in grid {
        if let std::collections::hash_map::Entry::Vacant(e) = bases.entry(weight_key(c)) {
            e.insert(SpecEngine::build(model, norms, *c)?);
        }
    }
    let cfg = &model.config;
    let s_w = BF16_BITS / 8.0 * model.weight_count() as f64;
    let mean_prompt = prompts.iter().map(Vec::len).sum::<usize>() as f64 / prompts.len() as f64;
    let mean_context = mean_prompt + opts.max_tokens as f64 / 2.0;
    let s_kv = BF16_BITS / 8.0 * (2 * cfg.layers * cfg.d_model) as f64 * mean_context;

    let rows: Result<Vec<GridRow>> = grid
        .par_iter()
        .map(|c| {
            c.validate()?;
            let mut engine = bases[&weight_key(c)].clone();
            engine.config = *c;
            let stats = evaluate(&engine, prompts, opts.max_tokens, opts.sampling, opts.seed)?;
            let alpha = stats.alpha();
            let draft_kv_bits = stats.bytes_draft_per_round() * 8.0 / c.gamma as f64 - engine.draft_weight_bits as f64;
            Ok(GridRow {
                config: *c,
                alpha,
                s_w,
                s_kv,
                objective: objective_j(alpha, s_w, s_kv, c, BF16_BITS)?,
                measured_objective: objective_j_measured(alpha, engine.draft_weight_bits as f64, draft_kv_bits)?,
                compressed_bytes: engine.target_weight_bits as f64 / 8.0,
            })
        })
        .collect();
    let rows = rows?;
    let best = argmax_rows(&rows).expect("non-empty grid");
    Ok(GridSearchResult { best, rows })
}

/// Inputs of the memory-bound speedup model. Byte counts are per token
/// for the draft, per verification pass for the target and per token for
/// plain autoregressive decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupInputs<'a> {
    pub bytes_draft_per_token: f64,
    pub bytes_target_pass: f64,
    pub bytes_baseline_token: f64,
    /// Rounds by accepted drafted tokens, `0..=gamma`.
    pub histogram: &'a [u64],
    pub gamma: usize,
    pub overhead_fraction: f64,
}

/// Mean accepted drafted tokens per round.
pub fn expected_accepted(histogram: &[u64]) -> Result<f64> {
    let rounds: u64 = histogram.iter().sum();
    if rounds == 0 {
        return Err(Error::EmptyInput("acceptance histogram"));
    }
    let accepted: u64 = histogram.iter().enumerate().map(|(n, &c)| n as u64 * c).sum();
    Ok(accepted as f64 / rounds as f64)
}

/// Throughput relative to plain decoding:
/// `(E[n] + 1) t_base / (gamma t_draft + t_target (1 + overhead))`.
pub fn speedup_estimate(inputs: &SpeedupInputs, hw: &HardwareProfile) -> Result<f64> {
    if inputs.histogram.len() != inputs.gamma + 1 {
        return Err(Error::ShapeMismatch {
            expected: inputs.gamma + 1,
            actual: inputs.histogram.len(),
        });
    }
    for (name, v) in [
        ("draft bytes", inputs.bytes_draft_per_token),
        ("target bytes", inputs.bytes_target_pass),
        ("baseline bytes", inputs.bytes_baseline_token),
        ("overhead", inputs.overhead_fraction),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} {v} must be non-negative")));
        }
    }
    let bw = hw.memory_bandwidth;
    let e_n = expected_accepted(inputs.histogram)?;
    let t_draft = inputs.bytes_draft_per_token / bw;
    let t_target = inputs.bytes_target_pass / bw;
    let t_base = inputs.bytes_baseline_token / bw;
    let denom = inputs.gamma as f64 * t_draft + t_target * (1.0 + inputs.overhead_fraction);
    if denom <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((e_n + 1.0) * t_base / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRow {
    pub name: String,
    pub numel: usize,
    pub entropy: f64,
    pub avg_unary_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub rows: Vec<EntropyRow>,
    /// Element-weighted means over all rows.
    pub aggregate: EntropyRow,
}

/// Exponent entropy and per-tensor unary code length.
pub fn entropy_report(tensors: &[(&str, &[Bf16])]) -> Result<EntropyReport> {
    let mut rows = Vec::with_capacity(tensors.len());
    for (name, values) in tensors {
        if values.is_empty() {
            return Err(Error::EmptyInput("tensor"));
        }
        let exps: Vec<u8> = values.iter().map(|v| v.exponent()).collect();
        let book = UnaryCodebook::build(&exps)?;
        rows.push(EntropyRow {
            name: name.to_string(),
            numel: values.len(),
            entropy: shannon_entropy(&exps),
            avg_unary_bits: avg_unary_bits(&exps, &book)?,
        });
    }
    let n: usize = rows.iter().map(|r| r.numel).sum();
    let weighted = |f: fn(&EntropyRow) -> f64| rows.iter().map(|r| f(r) * r.numel as f64).sum::<f64>() / n as f64;
    let aggregate = EntropyRow {
        name: "all".into(),
        numel: n,
        entropy: if n == 0 { 0.0 } else { weighted(|r| r.entropy) },
        avg_unary_bits: if n == 0 { 0.0 } else { weighted(|r| r.avg_unary_bits) },
    };
    Ok(EntropyReport { rows, aggregate })
}

fn fmt_config(c: &DraftConfig) -> String {
    format!(
        "{}\t{:.2}\t{}\t{:.2}\t{}\t{}",
        c.mode.as_u8(),
        c.weight_prune,
        c.weight_truncate,
        c.kv_prune,
        c.kv_truncate,
        c.gamma
    )
}

/// Tab-separated grid table with a header line; the best row is marked.
pub fn grid_table(result: &GridSearchResult) -> String {
    let mut s = String::from("mode\tw_prune\tw_trunc\tkv_prune\tkv_trunc\tgamma\talpha\tobjective\tmeasured_objective\tcompressed_bytes\tbest\n");
    for (i, r) in result.rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6e}\t{:.6e}\t{:.0}\t{}",
            fmt_config(&r.config),
            r.alpha,
            r.objective,
            r.measured_objective,
            r.compressed_bytes,
            if i == result.best { "*" } else { "" }
        );
    }
    s
}

pub fn entropy_table(report: &EntropyReport) -> String {
    let mut s = String::from("tensor\tnumel\tentropy\tavg_unary_bits\n");
    for r in report.rows.iter().chain(std::iter::once(&report.aggregate)) {
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", r.name, r.numel, r.entropy, r.avg_unary_bits);
    }
    s
}
