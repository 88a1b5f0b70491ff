use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: upper-left 3x3 block is not invertible")]
    SingularMatrix,

    #[error("constant target: variance {variance:e} is below 1e-12")]
    ConstantTarget { variance: f64 },

    #[error("no overlap: valid fraction {valid_fraction:.6} is below 0.01")]
    NoOverlap { valid_fraction: f64 },

    #[error("no admissible patches ({tested} tested)")]
    NoAdmissiblePatches { tested: usize },

    #[error("NIfTI format error: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("expected a 3D volume, header has dim[0] = {0}")]
    Dimensionality(i16),

    #[error("truncated data section: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("affine document error: {0}")]
    Document(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
