use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e}, norm {norm:.3e})")]
    NotSymmetric { asymmetry: f64, norm: f64 },

    #[error("symmetric eigensolver did not converge for a {0}x{0} matrix")]
    ConvergenceFailure(usize),

    #[error("energy threshold eta must lie in (0, 1], got {0}")]
    InvalidEta(f64),

    #[error("eigenscaling epsilon must lie in (1, 2), got {0}")]
    InvalidEpsilon(f64),

    #[error("signature length m must lie in [1, {max}], got {m}")]
    InvalidM { m: usize, max: usize },

    #[error("signature lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("cost matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("exhaustive assignment supports at most {max} heads, got {h}")]
    TooLarge { h: usize, max: usize },

    #[error("top-n must lie in [1, {max}], got {n}")]
    InvalidN { n: usize, max: usize },

    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("gamma must lie in [0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("pixel ({x}, {y}) is not covered by any window")]
    CoverageGap { x: usize, y: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("invalid label map file: {0}")]
    InvalidLabelMap(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Whether the failure is numerical rather than a bad input or file.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::ConvergenceFailure(_) | Error::NonFinite(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
