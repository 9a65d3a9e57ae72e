use thiserror::Error;

/// Errors surfaced by the tensor/tape core and the modules built on it.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("{op}: non-finite value produced (debug checks enabled)")]
    NonFinite { op: &'static str },

    #[error("context embedding already normalized")]
    DoubleNormalization,

    #[error("unknown token id {id} (vocab size {vocab})")]
    UnknownToken { id: u16, vocab: usize },

    #[error("generated-parameter layout mismatch: {0}")]
    Layout(String),

    #[error("unsatisfiable task layout after {tries} attempts")]
    UnsatisfiableLayout { tries: usize },

    #[error("no stored chunk covers timestep {t}")]
    NoPrediction { t: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
