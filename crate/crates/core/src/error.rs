use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tensor data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("CG divergence: non-finite iterate at iteration {iter}")]
    CgDivergence { iter: usize },

    #[error("non-finite objective value at probe of coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    #[error("label {label} out of range for {num_labels} labels at position {pos}")]
    LabelOutOfRange {
        label: usize,
        num_labels: usize,
        pos: usize,
    },

    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("scale factor must be positive, got {alpha}")]
    NonPositiveAlpha { alpha: f64 },

    #[error("degenerate potential norm")]
    DegenerateNorm,

    #[error("all grid points evaluated to a non-finite loss")]
    NoFiniteGridPoint,

    #[error("grid must be nonempty")]
    EmptyGrid,

    #[error("non-finite gradient in tensor `{tensor}`{}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    NonFiniteGradient { tensor: String, epoch: Option<usize> },

    #[error("malformed data at line {line}: {msg}")]
    DataFormat { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
