use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("xyz parse error on line {line}: {message}")]
    Xyz { line: usize, message: String },

    #[error("unsupported element symbol `{0}` (expected H, O or Cu)")]
    UnknownElement(String),

    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("degenerate bond angle: an arm has zero length")]
    DegenerateAngle,

    #[error("degenerate dihedral: an outer bond is parallel to the central axis")]
    DegenerateDihedral,

    #[error("graph construction failed: {0}")]
    Graph(String),

    #[error("angle {value} deg outside the valid range for {kind}")]
    AngleOutOfRange { kind: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward pass: {0}")]
    Backward(String),

    #[error("representation mismatch: model expects {expected}, bundle is {found}")]
    RepresentationMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("fit did not converge after {iterations} iterations (best residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("checkpoint format error on line {line}: {message}")]
    Checkpoint { line: usize, message: String },

    #[error("data format error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
