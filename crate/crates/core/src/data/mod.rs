//! Corpus preparation: per-document statistics and filters, a pluggable
//! embedder, pool-based diversity selection, and proportional mixture
//! sampling across sources.

mod embed;
mod filter;
mod mixture;
mod run;
mod select;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{cosine, Embedder, TrigramEmbedder};
pub use filter::{compute_stats, filter_document, DocStats, FilterRules, RejectReason};
pub use mixture::{mix_documents, mixture_sample, MixtureSample, MixtureSpec, SourceSampler};
pub use run::{pipeline_run, Manifest, PipelineConfig, Skip};
pub use select::{diversity_select, DiversityConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mixture names source {0:?} but no documents carry that tag")]
    UnknownSource(String),
    #[error("source {0:?} has no documents")]
    EmptySource(String),
    #[error("target_count {target} exceeds the {available} documents available")]
    TargetCount { target: usize, available: usize },
    #[error("no documents to select from")]
    NoDocuments,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Kv(#[from] crate::kv::KvError),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One JSONL record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub text: String,
}
