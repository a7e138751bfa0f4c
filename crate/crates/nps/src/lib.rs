//! Fiber simulation, file formats and experiment orchestration for neural
//! probabilistic shaping.
//!
//! The numerical core (encoder, perturbative channel, demapper, trainer,
//! distribution matcher) lives in `nps-core`; this crate adds the
//! split-step Fourier reference channel, checkpoint and result formats,
//! configuration files and the `nps` command line tool.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod frame;
pub mod plot;
pub mod records;
pub mod ssfm;

pub use nps_core as core;

use std::path::PathBuf;

pub type Result<T, E = NpsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum NpsError {
    /// Invalid configuration or usage; maps to exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] nps_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Runtime(String),
}

impl NpsError {
    pub fn config(msg: impl Into<String>) -> Self {
        NpsError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NpsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        NpsError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 for usage and configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            NpsError::Config(_) => 2,
            _ => 1,
        }
    }
}
