//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown concept id `{0}`")]
    UnknownConcept(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate label name `{0}`")]
    DuplicateLabel(String),

    #[error("missing fact verdicts for {} (label, concept) pairs: {}", .0.len(), format_pairs(.0))]
    MissingVerdicts(Vec<(String, String)>),

    #[error("shape mismatch: {context} (expected {expected}, got {actual})")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("LLM response failed format validation after {attempts} attempts; last response: {last_response:?}")]
    LlmFormat {
        attempts: usize,
        last_response: String,
    },

    #[error("LLM transport error: {0}")]
    LlmTransport(String),

    #[error("candidate pool has {pool} entries but {k} were requested")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("candidate embeddings are degenerate (all identical); selection cannot rank them")]
    DegenerateCandidates,

    #[error("label `{label}` has {have} images but beta={beta} instances were requested; use a smaller beta")]
    TooFewImages {
        label: String,
        have: usize,
        beta: usize,
    },

    #[error("checkpoint was trained against bank version hash {expected} but the loaded bank hashes to {actual}")]
    BankVersionMismatch { expected: String, actual: String },

    #[error("embedding cache at {path} is corrupt ({reason}); delete it and rebuild with the embed command")]
    CacheCorrupt { path: String, reason: String },

    #[error("cache/backend dimension mismatch: cache holds d={cache_d}, backend produces d={backend_d}")]
    CacheDimMismatch { cache_d: usize, backend_d: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unreadable image `{path}`: {reason}")]
    UnreadableImage { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    let shown: Vec<String> = pairs
        .iter()
        .take(8)
        .map(|(l, c)| format!("({l}, {c})"))
        .collect();
    let mut s = shown.join(", ");
    if pairs.len() > 8 {
        s.push_str(", ...");
    }
    s
}

pub type Result<T> = std::result::Result<T, Error>;
