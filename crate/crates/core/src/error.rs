use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {what} in dynamics input")]
    NonFinite { what: &'static str },

    #[error("quaternion norm {norm} deviates from unity by more than 1e-3")]
    QuaternionNorm { norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config {path}:{line}: {msg}")]
    Config {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset sampler accepted {accepted} of {drawn} draws; {diagnostic}")]
    LowAcceptance {
        accepted: usize,
        drawn: usize,
        diagnostic: String,
    },

    #[error("training diverged at iteration {iteration}: loss {loss} vs initial {initial}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("certificate check failed: {0}")]
    Certificate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
