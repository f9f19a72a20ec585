//! Error taxonomy shared across the workspace.
//!
//! Internal contract violations (shape mismatches, misuse of the tape) panic;
//! everything that can be triggered by external input — config files, CSV
//! data, wire bytes, transcripts — surfaces as a [`FedError`] so the CLI can
//! map it to a stable exit code.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("framing error: {0}")]
    Framing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("audit failure: {0}")]
    Audit(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 0 is success, everything else groups
    /// errors by who has to fix them.
    pub fn exit_code(&self) -> i32 {
        match self {
            FedError::Config(_) => 2,
            FedError::Data(_) | FedError::Parse { .. } | FedError::Io { .. } => 3,
            FedError::Framing(_)
            | FedError::Protocol(_)
            | FedError::Bounds(_)
            | FedError::Transport(_) => 4,
            FedError::Audit(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
