//! IO, file formats, configuration, and the command pipeline around
//! `freegen-core`. Everything a run produces lives on disk in the documented
//! formats; commands compose through files only.

pub mod commands;
pub mod config;
pub mod formats;
pub mod pipeline;

use std::fmt;

/// Top-level failure classes, each mapped to a process exit code.
#[derive(Debug)]
pub enum PipelineError {
    /// Invalid configuration or arguments (exit 2).
    BadArgs(String),
    /// Filesystem or format failure (exit 3). The message names the path
    /// (and for integrity failures, the offending hash).
    Io(String),
    /// A non-finite value surfaced where the math guarantees finiteness
    /// (exit 4).
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::BadArgs(_) => 2,
            PipelineError::Io(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }

    /// Wraps a std::io error with the path it concerns.
    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> PipelineError {
        PipelineError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::BadArgs(m) => write!(f, "invalid arguments: {m}"),
            PipelineError::Io(m) => write!(f, "io error: {m}"),
            PipelineError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

pub type Result<T> = std::result::Result<T, PipelineError>;
