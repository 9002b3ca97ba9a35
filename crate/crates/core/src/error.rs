use std::path::PathBuf;

/// Errors raised anywhere in the analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, symmetry, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Model or experiment configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// The quantity is undefined for this input (e.g. spectrum of all-zero features).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
