use std::path::PathBuf;

/// Crate-wide error type. Variants map one-to-one onto the error categories
/// surfaced by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent config combination.
    #[error("config: {0}")]
    Config(String),

    /// Invalid argument to an operation (shape mismatch, bad index, ...).
    #[error("argument: {0}")]
    Argument(String),

    /// Checkpoint or dataset (de)serialization failure, naming the field.
    #[error("persistence: {field}: {message}")]
    Persistence { field: String, message: String },

    /// Checkpoint version newer than this build understands.
    #[error("version: checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Training failure, carrying the step at which it occurred.
    #[error("training: step {step}: {message}")]
    Training { step: usize, message: String },

    /// Sampling failure, carrying the reverse-process step index.
    #[error("sampling: step {step}: {message}")]
    Sampling { step: usize, message: String },

    /// Procedural scene generation failed (e.g. placement retries exhausted).
    #[error("generation: {0}")]
    Generation(String),

    /// Filesystem error with the path involved.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category token, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Persistence { .. } => "persistence",
            Error::Version { .. } => "version",
            Error::Training { .. } => "training",
            Error::Sampling { .. } => "sampling",
            Error::Generation(_) => "generation",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
