use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "non-finite loss at step {step} (epoch {epoch}, lr {lr:e}); components: {components}"
    )]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        lr: f64,
        components: String,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading or writing a parameter checkpoint. Each kind is
/// distinct so callers can tell a missing file from a corrupted one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("not a checkpoint file (bad magic): {}", .0.display())]
    BadMagic(PathBuf),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no clean counterpart for `{id}` (expected {})", expected.display())]
    MissingCounterpart { id: String, expected: PathBuf },

    #[error("dimension mismatch for `{id}`: rainy {rainy:?} vs clean {clean:?}")]
    DimensionMismatch {
        id: String,
        rainy: (usize, usize),
        clean: (usize, usize),
    },

    #[error("failed to decode image {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("failed to encode image {}: {message}", path.display())]
    Encode { path: PathBuf, message: String },

    #[error("image {height}x{width} is smaller than the {patch}x{patch} patch")]
    TooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("dataset at {} is empty", .0.display())]
    Empty(PathBuf),

    #[error("unknown pair id `{0}`")]
    UnknownId(String),

    #[error("malformed pair manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
}
