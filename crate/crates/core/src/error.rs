//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, KgtError>;

#[derive(Debug, Error)]
pub enum KgtError {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch in {context}: {detail}")]
    Dim {
        context: &'static str,
        detail: String,
    },

    /// A parameter or option is outside its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every entry of a softmax row was masked out; the neighbor set is empty.
    #[error("softmax row {row} is fully masked (empty neighbor set)")]
    DegenerateRow { row: usize },

    /// An operation produced NaN or infinity. Fail fast instead of propagating.
    #[error("non-finite value produced by {context}")]
    NonFinite { context: &'static str },

    /// Internal bookkeeping fields are mutually inconsistent.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Caller-supplied data is unusable (e.g. non-finite input image).
    #[error("invalid input: {0}")]
    Input(String),

    /// The training loss stopped being finite.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed PGM stream; `offset` is the byte position of the problem.
    #[error("pgm parse error at byte {offset}: {msg}")]
    Pgm { offset: usize, msg: String },

    /// Malformed config text; `line` is 1-based.
    #[error("config error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}

/// Distinct failure modes when reading a model checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes, expected \"KGT1\"")]
    BadMagic,

    #[error("unsupported checkpoint version {found}")]
    Version { found: u32 },

    #[error("truncated checkpoint at byte {offset}")]
    Truncated { offset: usize },

    /// Structurally valid file that does not match the declared config
    /// (unknown tensor name, wrong shape, wrong dtype code).
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
}
