//! Run manifests: `key = value` lines that pin down everything a run
//! depends on. Blank lines and `#` comments are ignored.

use std::path::Path;

use cassandra_core::container::{DraftConfig, ExponentMode};
use cassandra_core::perfmodel::HardwareProfile;
use cassandra_core::specdecode::{ModelConfig, Sampling};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum PromptSource {
    /// `count` prompts of `len` tokens drawn from `seed`.
    Random { seed: u64, count: usize, len: usize },
    /// One prompt per line, space-separated token ids.
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub draft: DraftConfig,
    pub sampling: Sampling,
    pub max_tokens: usize,
    pub hardware: HardwareProfile,
    pub overhead: f64,
    pub prompts: Option<PromptSource>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn mode_str(m: ExponentMode) -> &'static str {
    match m {
        ExponentMode::Unary => "1",
        ExponentMode::Mx => "2",
    }
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let (sampling, temperature) = match self.sampling {
            Sampling::Greedy => ("greedy", 1.0),
            Sampling::Sampled { temperature } => ("sampled", temperature),
        };
        let prompts = match &self.prompts {
            None => "none".to_string(),
            Some(PromptSource::Random { seed, count, len }) => format!("random:{seed}:{count}:{len}"),
            Some(PromptSource::File(p)) => format!("file:{p}"),
        };
        let m = &self.model;
        let d = &self.draft;
        let lines = [
            ("command", self.command.clone()),
            ("seed", self.seed.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("draft.mode", mode_str(d.mode).to_string()),
            ("draft.weight_prune", d.weight_prune.to_string()),
            ("draft.weight_truncate", d.weight_truncate.to_string()),
            ("draft.kv_prune", d.kv_prune.to_string()),
            ("draft.kv_truncate", d.kv_truncate.to_string()),
            ("draft.gamma", d.gamma.to_string()),
            ("sampling", sampling.to_string()),
            ("temperature", temperature.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("hardware.label", self.hardware.label.clone()),
            ("hardware.bandwidth", self.hardware.memory_bandwidth.to_string()),
            ("overhead", self.overhead.to_string()),
            ("prompts", prompts),
            ("inputs", self.inputs.join(",")),
            ("outputs", self.outputs.join(",")),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("manifest line {}: expected key = value", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&str, CliError> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| CliError::Input(format!("manifest is missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CliError> {
            v.parse()
                .map_err(|_| CliError::Input(format!("manifest `{k}`: cannot parse `{v}`")))
        }
        let n = |k: &str| -> Result<usize, CliError> { num(k, get(k)?) };
        let f = |k: &str| -> Result<f64, CliError> { num(k, get(k)?) };
        let mode = match get("draft.mode")? {
            "1" => ExponentMode::Unary,
            "2" => ExponentMode::Mx,
            other => return Err(CliError::Input(format!("manifest draft.mode `{other}`"))),
        };
        let sampling = match get("sampling")? {
            "greedy" => Sampling::Greedy,
            "sampled" => Sampling::Sampled {
                temperature: f("temperature")?,
            },
            other => return Err(CliError::Input(format!("manifest sampling `{other}`"))),
        };
        let prompts = match get("prompts")?.split_once(':') {
            None if get("prompts")? == "none" => None,
            Some(("file", p)) => Some(PromptSource::File(p.to_string())),
            Some(("random", rest)) => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 3 {
                    return Err(CliError::Input("manifest prompts: expected random:seed:count:len".into()));
                }
                Some(PromptSource::Random {
                    seed: num("prompts", parts[0])?,
                    count: num("prompts", parts[1])?,
                    len: num("prompts", parts[2])?,
                })
            }
            _ => return Err(CliError::Input("manifest prompts: unknown source".into())),
        };
        let list = |k: &str| -> Result<Vec<String>, CliError> {
            let v = get(k)?;
            Ok(if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(str::to_string).collect()
            })
        };
        Ok(RunManifest {
            command: get("command")?.to_string(),
            seed: num("seed", get("seed")?)?,
            model: ModelConfig {
                vocab: n("model.vocab")?,
                d_model: n("model.d_model")?,
                layers: n("model.layers")?,
                ffn_mult: n("model.ffn_mult")?,
                max_seq_len: n("model.max_seq_len")?,
            },
            draft: DraftConfig {
                mode,
                weight_prune: f("draft.weight_prune")?,
                weight_truncate: num("draft.weight_truncate", get("draft.weight_truncate")?)?,
                kv_prune: f("draft.kv_prune")?,
                kv_truncate: num("draft.kv_truncate", get("draft.kv_truncate")?)?,
                gamma: n("draft.gamma")?,
            },
            sampling,
            max_tokens: n("max_tokens")?,
            hardware: HardwareProfile::new(get("hardware.label")?, f("hardware.bandwidth")?)?,
            overhead: f("overhead")?,
            prompts,
            inputs: list("inputs")?,
            outputs: list("outputs")?,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }
}

/// One prompt per non-empty line, tokens separated by whitespace.
pub fn parse_prompts(text: &str, vocab: usize) -> Result<Vec<Vec<u32>>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<u32> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .ok()
                    .filter(|&v| (v as usize) < vocab)
                    .ok_or_else(|| CliError::Input(format!("prompt line {}: bad token `{t}`", n + 1)))
            })
            .collect::<Result<_, _>>()?;
        out.push(tokens);
    }
    if out.is_empty() {
        return Err(CliError::Input("no prompts".into()));
    }
    Ok(out)
}

pub fn format_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}
