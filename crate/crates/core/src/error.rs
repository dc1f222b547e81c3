use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("non-finite value in row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has L2 norm {norm} but the store is flagged normalized")]
    NotNormalized { row: usize, norm: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("manifest token counts sum to {manifest} but embeddings have {embeddings} rows")]
    TokenCountMismatch { manifest: usize, embeddings: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("document {0:?} has zero tokens")]
    EmptyDocument(String),

    #[error("k' = {k_prime} exceeds the {total} available tokens")]
    KPrimeTooLarge { k_prime: usize, total: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("document {0:?} is not in the candidate set")]
    NotACandidate(String),

    #[error("query token {row} has no retrieved hits to impute from")]
    EmptyHitRow { row: usize },

    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),

    #[error("no document in the batch retrieved any token; gradient is undefined")]
    UndefinedGradient,

    #[error("missing token texts: {0}")]
    MissingTexts(String),

    #[error("no qrels for query {0:?}")]
    MissingQrels(String),

    #[error("rank bucket {0} is empty")]
    EmptyRankBucket(usize),

    #[error("store is not flagged normalized; cosine histogram requires unit vectors")]
    Unnormalized,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
