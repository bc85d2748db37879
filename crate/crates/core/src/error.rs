//! Crate-wide error type and process exit-code mapping.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("phrase not present in embedding table: {0:?}")]
    Lookup(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("degenerate offset direction: {0}")]
    DegenerateDirection(String),

    #[error("unparsable LLM answer ({message}); raw response: {raw:?}")]
    Format { message: String, raw: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("scene {index}: {source}")]
    Scene {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericDomain(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub fn in_scene(self, index: usize) -> Self {
        Error::Scene { index, source: Box::new(self) }
    }

    /// Innermost error, skipping stage and scene tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Scene { source, .. } => source.root(),
            other => other,
        }
    }

    /// CLI exit code: 2 validation, 3 IO/transport, 4 numeric domain.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Io { .. } | Error::Transport(_) => 3,
            Error::NumericDomain(_) | Error::DegenerateDirection(_) => 4,
            _ => 2,
        }
    }
}

/// Converts a serde_json error into a [`Error::Parse`] carrying the byte offset
/// into `text` where parsing stopped.
pub(crate) fn json_parse_error(text: &str, err: &serde_json::Error) -> Error {
    Error::Parse { offset: byte_offset(text, err.line(), err.column()), message: err.to_string() }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
