//! Draft/verify speculative decoding on a deterministic toy model.
//!
//! The draft pass reads only speculation data: weights and KV rows decoded
//! through the draft view. The target pass verifies all drafted positions
//! at once from the full data and commits the accepted prefix plus one
//! token of its own. Greedy runs in lossless mode reproduce the plain
//! autoregressive output exactly.

mod kv;
mod model;
mod runner;
mod sweep;
mod verify;

pub use kv::{KvMode, KvRow, KvScratch, KvStore, LayerKv};
pub use model::{
    argmax, softmax, LayerWeights, ModelConfig, ModelWeights, TensorRole, TinyLM, WeightTensor, CALIBRATION_SAMPLES,
};
pub use runner::{
    autoregressive_with, calibrate, run_autoregressive, run_speculative, Sampling, SpecEngine, SpecOutput,
    SpecRunStats,
};
pub use sweep::{evaluate, random_prompts, sweep_tradeoff, tradeoff_grid, Family, TradeoffPoint, TradeoffRow};
pub use verify::{count_accepted, greedy_verify, residual, sample_index, verify_and_accept};
