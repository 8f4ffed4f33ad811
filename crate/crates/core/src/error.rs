use std::path::PathBuf;

use thiserror::Error;

use crate::problem::DescriptorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid channel block {0}: supported blocks are 8 and 16")]
    ChannelBlock(usize),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("unsupported problem for {kernel}: {reason}")]
    Unsupported { kernel: String, reason: String },

    #[error("could not allocate {bytes} bytes of scratch for the lowered matrix")]
    ScratchAlloc { bytes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("energy: {0}")]
    Energy(#[from] crate::energy::EnergyError),

    #[error("{kernel} failed the correctness gate: max_rel_diff {diff:e} > tolerance {tolerance:e}")]
    Correctness {
        kernel: String,
        diff: f64,
        tolerance: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
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
