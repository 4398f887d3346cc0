//! Token-budget training with a two-stage sequence length, AdamW, and the
//! evaluation helpers used at milestones.

mod eval;
mod metrics;
mod optim;
mod schedule;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;
use crate::tokenizer::TokenizerError;

pub use eval::{
    evaluate_multichoice, evaluate_ppl, evaluate_ppl_tokens, generate, token_logprobs, EvalTask, ItemScore, McItem, McReport, Normalization,
    Sampling,
};
pub use metrics::{parse_csv, render_csv, MetricsRow, METRICS_HEADER};
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamHyper, OptState, StepInfo};
pub use schedule::TrainSchedule;
pub use trainer::{checkpoint_path, run_training, Milestones, RunOptions, TokenStream, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("gradient is not finite; step aborted")]
    NonFiniteGradient,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("item {item}: choice {choice} encodes to no tokens")]
    EmptyChoice { item: usize, choice: usize },
    #[error("task line {line}: {msg}")]
    Task { line: usize, msg: String },
    #[error("prompt of {len} tokens exceeds max_seq_len {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("metrics line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Kv(#[from] crate::kv::KvError),
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.into(),
            source,
        }
    }
}
