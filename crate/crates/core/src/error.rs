use std::path::PathBuf;

use thiserror::Error;

use crate::scene_graph::TrackId;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Validation { what: String, reason: String },

    #[error("unknown frame {0}")]
    UnknownFrame(usize),

    #[error("unknown track {0}")]
    UnknownTrack(TrackId),

    #[error("track {0} already present in graph")]
    DuplicateTrack(TrackId),

    #[error("no latent code for track {0}")]
    MissingLatent(TrackId),

    #[error("no field model for class {0}")]
    MissingClassModel(u32),

    #[error("pixel ({0}, {1}) outside image")]
    PixelOutOfBounds(usize, usize),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("samples not sorted by ray parameter at index {0}")]
    Unsorted(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {0}")]
    Diverged(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
