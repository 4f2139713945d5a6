//! Command-line front end: WAV I/O, the run configuration file, and the
//! `enhance`, `train`, `eval`, `gradcheck`, `params`, `ablate` commands.

pub mod commands;
pub mod config;
pub mod wav;

pub use config::RunConfig;
pub use wav::{wav_read, wav_write};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] forknet::Error),
    #[error("{path}: {msg}")]
    Wav { path: String, msg: String },
    #[error("config: {0}")]
    Config(String),
    /// A check ran to completion and found violations.
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
