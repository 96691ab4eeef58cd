//! Self-speculative decoding with a split speculation/verification tensor
//! format.
//!
//! Weights and KV rows are partitioned into *speculation data* (a pruned,
//! mantissa-truncated, exponent-compressed subset read by the draft pass)
//! and *verification data* (everything else, read only when the target
//! model verifies). The draft model is therefore a bit-subset of the
//! target model and costs no extra memory.

pub mod bf16;
pub mod bitstream;
pub mod cassfile;
pub mod container;
pub mod decoder_sim;
pub mod error;
pub mod expcodec;
pub mod matrix;
pub mod perfmodel;
pub mod selection;
pub mod specdecode;
pub mod superblock;

pub use bf16::Bf16;
pub use container::{CassandraTensor, DraftConfig, ExponentMode, StreamKind, TensorCodec, View};
pub use error::{Error, Result};
pub use selection::KeepBitmap;
