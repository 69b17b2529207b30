use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error(
        "no admissible solution for (p={p}, m={m}, T={horizon}): \
         p residual {p_residual:.3e}, m residual {m_residual:.3e} at bracket end"
    )]
    NoSolution {
        p: f64,
        m: f64,
        horizon: f64,
        p_residual: f64,
        m_residual: f64,
    },

    #[error(
        "rate solver did not converge after {iterations} iterations: \
         p residual {p_residual:.3e}, m residual {m_residual:.3e}"
    )]
    NonConvergence {
        iterations: usize,
        p_residual: f64,
        m_residual: f64,
    },

    #[error("dimension {dim} exceeded the cap of {cap} switch events")]
    EventCapExceeded { dim: usize, cap: usize },

    #[error("time {t} outside horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("non-finite state at t={t}")]
    NonFiniteState { t: f64 },

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("operation not available in {0} mode")]
    WrongMode(&'static str),

    #[error("covariance needs at least 2 Monte-Carlo samples, got {0}")]
    InsufficientSamples(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input")]
    EmptyInput,

    #[error("reliability bins hold no predictions")]
    ZeroCount,

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
