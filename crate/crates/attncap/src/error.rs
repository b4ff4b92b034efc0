//! Crate-wide error type.

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    /// An operation was called outside its contract (non-scalar loss,
    /// bad epsilon, invalid target index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "library of {requested} sequences is infeasible: only {available} distinct \
         length-{prefix_len} prefixes exist"
    )]
    InfeasibleLibrary {
        requested: u64,
        available: u128,
        prefix_len: usize,
    },

    #[error("slope function pole: N^(b*H+c) + d = {denom:e} at N={n}, H={h}")]
    SlopePole { denom: f64, n: f64, h: f64 },

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("insufficient coverage: {0}")]
    Coverage(String),

    /// Parameter set tagged for a different layer count than requested.
    #[error("preset mismatch: {0}")]
    PresetMismatch(String),

    /// Malformed on-disk artifact (library file, checkpoint, records, spec).
    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
