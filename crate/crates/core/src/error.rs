use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("byte-length mismatch in {file}: expected {expected} bytes, found {actual}")]
    ByteLengthMismatch {
        file: String,
        expected: usize,
        actual: usize,
    },

    #[error("zero-norm row {row} in {file}")]
    ZeroNormRow { file: String, row: usize },

    #[error("label {label} of sample {sample} out of range for {n_classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: i64,
        n_classes: usize,
    },

    #[error("malformed split: {0}")]
    MalformedSplit(String),

    #[error("labels missing: {0}")]
    MissingLabels(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero vector")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("clustering failure: {0}")]
    Clustering(String),

    #[error("class {0} has no feature rows")]
    EmptyClass(usize),

    #[error("insufficient candidates for class '{class_name}': wanted {wanted}, found {found}")]
    InsufficientCandidates {
        class_name: String,
        wanted: usize,
        found: usize,
    },

    #[error("description provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("config conflict: {0}")]
    ConfigConflict(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Clustering(_) | Error::Divergence { .. } | Error::NonFinite(_)
        )
    }
}
