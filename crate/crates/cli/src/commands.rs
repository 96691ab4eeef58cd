use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cassandra_core::cassfile::CassFile;
use cassandra_core::container::{encode_tensor, DraftConfig, ExponentMode, StreamKind, View};
use cassandra_core::matrix::Matrix;
use cassandra_core::perfmodel::{
    entropy_report, entropy_table, grid_search, grid_table, search_grid, speedup_estimate, GridSearchOptions,
    HardwareProfile, SpeedupInputs, BF16_BITS,
};
use cassandra_core::selection::{select_topk_per_row, wanda_scores, CalibrationNorms, KeepBitmap};
use cassandra_core::specdecode::{
    calibrate, random_prompts, run_autoregressive, sweep_tradeoff, tradeoff_grid, ModelConfig, Sampling,
    SpecEngine, SpecRunStats, TinyLM,
};
use cassandra_core::superblock::pack;

use crate::error::CliError;
use crate::manifest::{format_tokens, parse_prompts, PromptSource, RunManifest};
use crate::tensorio::{self, RawTensor};
use crate::{DraftArgs, FloatFormat, PromptArgs, SamplingArg, ViewArg};

const DEFAULT_HARDWARE: &str = "default";

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_cass(path: &Path) -> Result<(Vec<u8>, CassFile), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let file = CassFile::from_bytes(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    Ok((bytes, file))
}

fn mode_of(mode: u8) -> ExponentMode {
    if mode == 2 {
        ExponentMode::Mx
    } else {
        ExponentMode::Unary
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Manifest for commands that transform files rather than run the model.
fn file_manifest(command: &str, draft: DraftConfig, inputs: &[&Path], outputs: &[&Path]) -> Result<RunManifest, CliError> {
    Ok(RunManifest {
        command: command.into(),
        seed: 0,
        model: ModelConfig::default(),
        draft,
        sampling: Sampling::Greedy,
        max_tokens: 0,
        hardware: HardwareProfile::new(DEFAULT_HARDWARE, 1.0e12)?,
        overhead: 0.0,
        prompts: None,
        inputs: inputs.iter().map(|p| path_string(p)).collect(),
        outputs: outputs.iter().map(|p| path_string(p)).collect(),
    })
}

/// Per-row top-k with unit activation norms, so selection is by magnitude.
fn select(t: &RawTensor, keep: f64) -> Result<KeepBitmap, CliError> {
    if keep >= 1.0 {
        return Ok(KeepBitmap::all_kept(t.numel()));
    }
    let (rows, cols) = t.matrix_shape();
    let w = Matrix::new(rows, cols, t.values.iter().map(|v| v.to_f32()).collect())?;
    Ok(select_topk_per_row(&wanda_scores(&w, &CalibrationNorms::unit(cols))?, keep)?)
}

pub fn encode(input: &Path, output: &Path, draft: &DraftArgs, superblock: Option<usize>) -> Result<(), CliError> {
    let cfg = draft.config();
    cfg.validate()?;
    let raw = tensorio::read(input)?;
    let bitmap = select(&raw, cfg.weight_keep_fraction())?;
    let t = encode_tensor(&raw.values, &raw.dims, &bitmap, cfg.weight_codec())?;
    let stats = t.compression_stats();
    let file = match superblock {
        Some(per) => {
            let packed = pack(&t, View::Target, per)?;
            CassFile::with_packed(t, packed)
        }
        None => CassFile::new(t),
    };
    let bytes = file.to_bytes()?;
    write_file(output, &bytes)?;
    file_manifest("encode", cfg, &[input], &[output])?.write(&manifest_path(output))?;

    println!("output: {}", output.display());
    println!("mode: {}", cfg.mode.as_u8());
    println!("numel: {}", stats.numel);
    println!("kept: {}", stats.kept);
    println!("spec_bits_per_elem: {:.4}", stats.spec_bits_per_elem);
    println!("total_bits_per_elem: {:.4}", stats.total_bits_per_elem);
    println!("draft_compression_ratio: {:.4}", stats.draft_compression_ratio());
    println!("storage_ratio: {:.4}", stats.storage_ratio());
    println!("file_bytes: {}", bytes.len());
    Ok(())
}

pub fn decode(input: &Path, output: &Path, view: ViewArg, format: FloatFormat) -> Result<(), CliError> {
    let (_, file) = read_cass(input)?;
    let t = &file.tensor;
    let (view, name) = match view {
        ViewArg::Draft => (View::Draft, "draft"),
        ViewArg::Target => (View::Target, "target"),
    };
    let (values, _) = t.decode_with_report(view)?;
    let dims = &t.header.dims;
    let bytes = match format {
        FloatFormat::Bf16 => tensorio::to_bytes_bf16(dims, &values),
        FloatFormat::F32 => tensorio::to_bytes_f32(dims, &values.iter().map(|v| v.to_f32()).collect::<Vec<_>>()),
    };
    write_file(output, bytes)?;
    let mut m = file_manifest("decode", DraftConfig::uncompressed(t.header.mode, 1), &[input], &[output])?;
    m.command = format!("decode-{name}");
    m.write(&manifest_path(output))?;
    println!("output: {}", output.display());
    println!("view: {name}");
    println!("numel: {}", values.len());
    Ok(())
}

pub fn inspect(input: &Path) -> Result<(), CliError> {
    let (bytes, file) = read_cass(input)?;
    let layout = CassFile::layout(&bytes)?;
    let h = &file.tensor.header;
    let mode = match h.mode {
        ExponentMode::Unary => "1 (lossless unary exponents)".to_string(),
        ExponentMode::Mx => format!("2 (MX shared exponents, block {})", h.mx_block_size()),
    };
    let dims: Vec<String> = h.dims.iter().map(u32::to_string).collect();
    println!("file: {}", input.display());
    println!("mode: {mode}");
    println!("dims: {}", dims.join("x"));
    println!("numel: {}", h.numel);
    println!("kept: {}", h.kept);
    println!("spec_mantissa_bits: {}", h.spec_mantissa_bits);
    println!("header_bytes: {}", layout.header_bytes);
    let mut body = 0usize;
    for (kind, range) in StreamKind::ALL.iter().zip(&layout.sections) {
        println!("section {}: {} bytes", kind.name(), range.len());
        body += range.len();
    }
    if let (Some(range), Some(p)) = (&layout.packed, &file.packed) {
        println!(
            "section packed: {} bytes ({} superblocks, {} blocks)",
            range.len(),
            p.superblocks.len(),
            p.block_count()
        );
        body += range.len();
    }
    println!("file_bytes: {}", layout.file_bytes);
    let expected = layout.file_bytes - layout.header_bytes;
    if body != expected {
        return Err(CliError::Format(format!(
            "sections cover {body} bytes but the file has {expected} after the header"
        )));
    }
    println!("sections_total: {body} (file_bytes - header_bytes)");
    Ok(())
}

fn sampling_of(kind: SamplingArg, temperature: f64) -> Sampling {
    match kind {
        SamplingArg::Greedy => Sampling::Greedy,
        SamplingArg::Sampled => Sampling::Sampled { temperature },
    }
}

fn prompt_source(seed: u64, args: &PromptArgs) -> PromptSource {
    match &args.prompts {
        Some(p) => PromptSource::File(path_string(p)),
        None => PromptSource::Random {
            seed: args.prompt_seed.unwrap_or(seed),
            count: args.num_prompts,
            len: args.prompt_len,
        },
    }
}

fn load_prompts(source: &PromptSource, cfg: &ModelConfig) -> Result<Vec<Vec<u32>>, CliError> {
    match source {
        PromptSource::File(p) => {
            let p = Path::new(p);
            parse_prompts(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?, cfg.vocab)
        }
        &PromptSource::Random { seed, count, len } => {
            if count == 0 || len == 0 {
                return Err(CliError::Input("random prompts need a positive count and length".into()));
            }
            Ok(random_prompts(seed, count, len, cfg.vocab))
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_manifest(
    seed: u64,
    prompts: &PromptArgs,
    max_tokens: usize,
    sampling: SamplingArg,
    temperature: f64,
    draft: &DraftArgs,
    bandwidth: f64,
    overhead: f64,
) -> Result<RunManifest, CliError> {
    Ok(RunManifest {
        command: "simulate".into(),
        seed,
        model: ModelConfig::default(),
        draft: draft.config(),
        sampling: sampling_of(sampling, temperature),
        max_tokens,
        hardware: HardwareProfile::new(DEFAULT_HARDWARE, bandwidth)?,
        overhead,
        prompts: Some(prompt_source(seed, prompts)),
        inputs: Vec::new(),
        outputs: Vec::new(),
    })
}

fn histogram_line(stats: &SpecRunStats) -> String {
    stats
        .accepted_histogram
        .iter()
        .enumerate()
        .map(|(n, c)| format!("{n}:{c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Run the manifest and return the report and the generated tokens.
fn simulate_report(m: &RunManifest) -> Result<(String, Vec<Vec<u32>>), CliError> {
    let cfg = &m.model;
    let source = m
        .prompts
        .as_ref()
        .ok_or_else(|| CliError::Input("simulate needs a prompt source".into()))?;
    let prompts = load_prompts(source, cfg)?;
    let model = TinyLM::init(m.seed, *cfg)?;
    let engine = SpecEngine::build(&model, &calibrate(&model)?, m.draft)?;

    let mut stats = SpecRunStats::new(m.draft.gamma);
    let mut outputs = Vec::with_capacity(prompts.len());
    let mut lossless = true;
    for (i, prompt) in prompts.iter().enumerate() {
        let seed = m.seed.wrapping_add(i as u64);
        let out = engine.run(prompt, m.max_tokens, m.sampling, seed)?;
        if m.sampling == Sampling::Greedy {
            lossless &= run_autoregressive(&model, prompt, m.max_tokens, m.sampling, seed)? == out.tokens;
        }
        stats.merge(&out.stats);
        outputs.push(out.tokens);
    }

    let mean_prompt = prompts.iter().map(Vec::len).sum::<usize>() as f64 / prompts.len() as f64;
    let mean_context = mean_prompt + m.max_tokens as f64 / 2.0;
    let kv_bytes = BF16_BITS / 8.0 * (2 * cfg.layers * cfg.d_model) as f64 * mean_context;
    let baseline_bytes = engine.baseline_weight_bits as f64 / 8.0 + kv_bytes;
    let speedup = speedup_estimate(
        &SpeedupInputs {
            bytes_draft_per_token: stats.bytes_draft_per_round() / m.draft.gamma as f64,
            bytes_target_pass: stats.bytes_target_per_round(),
            bytes_baseline_token: baseline_bytes,
            histogram: &stats.accepted_histogram,
            gamma: m.draft.gamma,
            overhead_fraction: m.overhead,
        },
        &m.hardware,
    )?;

    let d = &m.draft;
    let mut r = String::new();
    let _ = writeln!(r, "mode: {}", d.mode.as_u8());
    let _ = writeln!(
        r,
        "draft: weight_prune={} weight_truncate={} kv_prune={} kv_truncate={} gamma={}",
        d.weight_prune, d.weight_truncate, d.kv_prune, d.kv_truncate, d.gamma
    );
    let _ = writeln!(r, "prompts: {}", prompts.len());
    let _ = writeln!(r, "rounds: {}", stats.rounds);
    let _ = writeln!(r, "tokens: {}", stats.tokens_generated);
    let _ = writeln!(r, "alpha: {:.6}", stats.alpha());
    let _ = writeln!(r, "mean_accepted: {:.6}", stats.mean_accepted());
    let _ = writeln!(r, "accepted_histogram: {}", histogram_line(&stats));
    let _ = writeln!(r, "weight_compression_ratio: {:.4}", engine.linear_compression_ratio);
    let _ = writeln!(
        r,
        "draft_weight_fraction: {:.4}",
        engine.draft_weight_bits as f64 / engine.baseline_weight_bits as f64
    );
    let _ = writeln!(r, "draft_bytes_per_round: {:.1}", stats.bytes_draft_per_round());
    let _ = writeln!(r, "target_bytes_per_round: {:.1}", stats.bytes_target_per_round());
    let _ = writeln!(r, "baseline_bytes_per_token: {baseline_bytes:.1}");
    let _ = writeln!(r, "hardware: {} {:e} B/s", m.hardware.label, m.hardware.memory_bandwidth);
    let _ = writeln!(r, "modeled_speedup: {speedup:.4}");
    match m.sampling {
        Sampling::Greedy => {
            let _ = writeln!(r, "lossless: outputs match baseline = {lossless}");
        }
        Sampling::Sampled { .. } => {
            let _ = writeln!(r, "lossless: not checked for sampled decoding");
        }
    }
    Ok((r, outputs))
}

pub fn simulate(mut m: RunManifest, out: Option<&Path>) -> Result<(), CliError> {
    let (report, outputs) = simulate_report(&m)?;
    print!("{report}");
    let tokens: String = outputs.iter().map(|t| format!("{}\n", format_tokens(t))).collect();
    for (i, t) in outputs.iter().enumerate() {
        println!("output {i}: {}", format_tokens(t));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let tokens_path = dir.join("tokens.txt");
        let report_path = dir.join("report.txt");
        write_file(&tokens_path, tokens)?;
        write_file(&report_path, &report)?;
        m.outputs = vec![path_string(&tokens_path), path_string(&report_path)];
        m.write(&dir.join("manifest.txt"))?;
    }
    Ok(())
}

fn model_and_prompts(seed: u64, args: &PromptArgs) -> Result<(TinyLM, PromptSource, Vec<Vec<u32>>), CliError> {
    let cfg = ModelConfig::default();
    let source = prompt_source(seed, args);
    let prompts = load_prompts(&source, &cfg)?;
    Ok((TinyLM::init(seed, cfg)?, source, prompts))
}

fn write_table(
    command: &str,
    table: &str,
    out: Option<&Path>,
    seed: u64,
    draft: DraftConfig,
    max_tokens: usize,
    source: PromptSource,
) -> Result<(), CliError> {
    let Some(path) = out else { return Ok(()) };
    write_file(path, table)?;
    let mut m = file_manifest(command, draft, &[], &[path])?;
    m.seed = seed;
    m.max_tokens = max_tokens;
    m.prompts = Some(source);
    m.write(&manifest_path(path))
}

pub fn sweep(
    seed: u64,
    prompt_args: &PromptArgs,
    max_tokens: usize,
    mode: u8,
    gamma: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (model, source, prompts) = model_and_prompts(seed, prompt_args)?;
    let points = tradeoff_grid(mode_of(mode), gamma);
    let rows = sweep_tradeoff(&model, &calibrate(&model)?, &points, &prompts, max_tokens, Sampling::Greedy, seed)?;
    let mut table = String::from("family\tprune\ttruncate\tnominal_ratio\tmeasured_ratio\talpha\trounds\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{}\t{:.1}\t{}\t{:.4}\t{:.4}\t{:.6}\t{}",
            r.family.label(),
            r.config.weight_prune,
            r.config.weight_truncate,
            r.nominal_ratio,
            r.measured_ratio,
            r.alpha,
            r.stats.rounds
        );
    }
    print!("{table}");
    write_table(
        "sweep",
        &table,
        out,
        seed,
        DraftConfig::uncompressed(mode_of(mode), gamma),
        max_tokens,
        source,
    )
}

pub fn gridsearch(
    seed: u64,
    prompt_args: &PromptArgs,
    max_tokens: usize,
    mode: u8,
    gamma: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (model, source, prompts) = model_and_prompts(seed, prompt_args)?;
    let grid = search_grid(mode_of(mode), gamma);
    let opts = GridSearchOptions {
        max_tokens,
        sampling: Sampling::Greedy,
        seed,
    };
    let result = grid_search(&model, &calibrate(&model)?, &prompts, &grid, &opts)?;
    let table = grid_table(&result);
    print!("{table}");
    let b = result.best_row();
    let c = &b.config;
    println!(
        "best: weight_prune={} weight_truncate={} kv_prune={} kv_truncate={} alpha={:.6} objective={:.6e}",
        c.weight_prune, c.weight_truncate, c.kv_prune, c.kv_truncate, b.alpha, b.objective
    );
    write_table("gridsearch", &table, out, seed, *c, max_tokens, source)
}

pub fn entropy(inputs: &[PathBuf], seed: u64) -> Result<(), CliError> {
    let named: Vec<(String, Vec<_>)> = if inputs.is_empty() {
        let model = TinyLM::init(seed, ModelConfig::default())?;
        model.tensors.into_iter().map(|t| (t.name, t.values)).collect()
    } else {
        inputs
            .iter()
            .map(|p| Ok((path_string(p), tensorio::read(p)?.values)))
            .collect::<Result<_, CliError>>()?
    };
    let refs: Vec<(&str, &[_])> = named.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    print!("{}", entropy_table(&entropy_report(&refs)?));
    Ok(())
}
