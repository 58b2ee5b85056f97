use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("patch center at ({x}, {y}) is masked out")]
    CenterInvalid { x: usize, y: usize },
    #[error("estimator requires a ground-truth flow")]
    MissingGroundTruth,
    #[error("missing external patch file {0}")]
    MissingExternalFile(PathBuf),
    #[error("no pixels are valid in both flows")]
    EmptyMask,
    #[error("solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("labeling is infeasible: {0}")]
    Infeasible(String),
    #[error("both strings are empty")]
    BothEmpty,
    #[error("bad window size {0}: must be odd and at least 3")]
    BadWindow(usize),
    #[error("expected {expected} patches, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("missing dataset files: {0}")]
    MissingFiles(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
