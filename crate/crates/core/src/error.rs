//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported image format in {}: {reason}", path.display())]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("zero-sized image in {}", .0.display())]
    EmptyImage(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("exposure field diverged: |log exposure| = {magnitude} exceeds {limit}")]
    DivergentExposure { magnitude: f64, limit: f64 },

    #[error("attack diverged at iteration {iteration}: {source}")]
    AttackDiverged {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("malformed weight file: {0}")]
    WeightFile(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid value for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("invalid group: {0}")]
    Group(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("report inconsistency: {0}")]
    Report(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config { key: key.to_string(), reason: reason.into() }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }
}
