//! `cassandra`: encode, inspect and decode speculation/verification tensor
//! files, and run speculative-decoding simulations on the toy model.

mod commands;
mod error;
mod manifest;
mod tensorio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cassandra_core::container::{DraftConfig, ExponentMode};

#[derive(Parser, Debug)]
#[command(name = "cassandra", version, about = "Speculation/verification tensor format and speculative decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DraftArgs {
    /// Exponent mode: 1 = lossless unary, 2 = MX block exponents.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub mode: u8,
    /// Fraction of weight elements moved out of the speculation data.
    #[arg(long, default_value_t = 0.4)]
    pub prune: f64,
    /// Low mantissa bits moved out of the speculation data.
    #[arg(long, default_value_t = 4)]
    pub truncate: u8,
    /// KV prune fraction; defaults to --prune.
    #[arg(long)]
    pub kv_prune: Option<f64>,
    /// KV truncation bits; defaults to --truncate.
    #[arg(long)]
    pub kv_truncate: Option<u8>,
    /// Drafted tokens per round.
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
}

impl DraftArgs {
    pub fn exponent_mode(&self) -> ExponentMode {
        if self.mode == 2 {
            ExponentMode::Mx
        } else {
            ExponentMode::Unary
        }
    }

    pub fn config(&self) -> DraftConfig {
        DraftConfig {
            mode: self.exponent_mode(),
            weight_prune: self.prune,
            kv_prune: self.kv_prune.unwrap_or(self.prune),
            weight_truncate: self.truncate,
            kv_truncate: self.kv_truncate.unwrap_or(self.truncate),
            gamma: self.gamma,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    /// Prompt file: one prompt per line, space-separated token ids.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Number of random prompts when no file is given.
    #[arg(long, default_value_t = 4)]
    pub num_prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    /// Seed for random prompts; defaults to the model seed.
    #[arg(long)]
    pub prompt_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    Draft,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FloatFormat {
    Bf16,
    F32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a raw BF16/F32 tensor file into a .cass container.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        draft: DraftArgs,
        /// Also store a packed copy of the target view with this many
        /// 128-byte blocks per superblock.
        #[arg(long)]
        superblock: Option<usize>,
    },
    /// Decode a .cass container into a raw tensor file.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = ViewArg::Target)]
        view: ViewArg,
        #[arg(long, value_enum, default_value_t = FloatFormat::Bf16)]
        format: FloatFormat,
    },
    /// Print the header and section sizes of a .cass container.
    Inspect { input: PathBuf },
    /// Run speculative decoding on the toy model and report acceptance,
    /// traffic and modeled speedup.
    Simulate {
        /// Rerun a saved manifest; other run flags are ignored.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long, value_enum, default_value_t = SamplingArg::Greedy)]
        sampling: SamplingArg,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[command(flatten)]
        draft: DraftArgs,
        /// Memory bandwidth in bytes per second.
        #[arg(long, default_value_t = 1.0e12)]
        bandwidth: f64,
        /// Decoder overhead as a fraction of target-pass time.
        #[arg(long, default_value_t = 0.05)]
        overhead: f64,
        /// Directory for tokens, report and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Acceptance rate against compression ratio over pruning and
    /// truncation settings.
    Sweep {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long, default_value_t = 48)]
        max_tokens: usize,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        mode: u8,
        #[arg(long, default_value_t = 5)]
        gamma: usize,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search prune/truncate settings for weights and KV by objective.
    Gridsearch {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long, default_value_t = 16)]
        max_tokens: usize,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        mode: u8,
        #[arg(long, default_value_t = 4)]
        gamma: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exponent entropy and unary code length per tensor.
    Entropy {
        /// Raw tensor files; with none, the toy model's weights are used.
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), error::CliError> {
    match cli.command {
        Command::Encode {
            input,
            output,
            draft,
            superblock,
        } => commands::encode(&input, &output, &draft, superblock),
        Command::Decode {
            input,
            output,
            view,
            format,
        } => commands::decode(&input, &output, view, format),
        Command::Inspect { input } => commands::inspect(&input),
        Command::Simulate {
            manifest,
            seed,
            prompts,
            max_tokens,
            sampling,
            temperature,
            draft,
            bandwidth,
            overhead,
            out,
        } => {
            let m = match manifest {
                Some(path) => manifest::RunManifest::read(&path)?,
                None => commands::simulate_manifest(
                    seed,
                    &prompts,
                    max_tokens,
                    sampling,
                    temperature,
                    &draft,
                    bandwidth,
                    overhead,
                )?,
            };
            commands::simulate(m, out.as_deref())
        }
        Command::Sweep {
            seed,
            prompts,
            max_tokens,
            mode,
            gamma,
            out,
        } => commands::sweep(seed, &prompts, max_tokens, mode, gamma, out.as_deref()),
        Command::Gridsearch {
            seed,
            prompts,
            max_tokens,
            mode,
            gamma,
            out,
        } => commands::gridsearch(seed, &prompts, max_tokens, mode, gamma, out.as_deref()),
        Command::Entropy { inputs, seed } => commands::entropy(&inputs, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cassandra: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
