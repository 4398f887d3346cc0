//! The decoder: token embedding, pre-norm residual blocks of
//! (RMSNorm → rotary self-attention with Q/K/V-only bias → residual →
//! RMSNorm → SiLU-gated FFN → residual), a final RMSNorm and an output head
//! that is tied to the embedding by default.

mod checkpoint;
mod config;
mod decoder;
mod layers;
mod weights;

pub use checkpoint::{Checkpoint, JCKP_MAGIC, JCKP_VERSION};
pub use config::{BiasPolicy, ModelConfig};
pub use decoder::{decoder_forward, loss_and_grads, sequence_loss, AttentionPath};
pub use layers::{attention, gated_ffn, rms_norm, rope_apply};
pub use weights::{param_count, DecoderWeights};

use thiserror::Error;

use crate::flash::AttentionError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("weights do not match config: {0}")]
    Weights(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("tiled attention is forward-only; use the naive path for gradients")]
    ForwardOnly,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
