use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RavError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RavError {
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("raster error: {0}")]
    Raster(String),

    #[error("degenerate table: {n_rows} rows x {n_cols} cols")]
    DegenerateTable { n_rows: usize, n_cols: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("reference unavailable: {0}")]
    ReferenceUnavailable(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("evaluation input error: {0}")]
    EvalInput(String),

    #[error("plugin error: {0}")]
    Plugin(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RavError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RavError::Io {
            path: path.into(),
            source,
        }
    }
}
