use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("kv cache has no entry for timestep {timestep}, layer {layer}")]
    MissingCacheEntry { timestep: usize, layer: usize },

    #[error("kv cache already holds an entry for timestep {timestep}, layer {layer}")]
    DuplicateCacheEntry { timestep: usize, layer: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 i/o, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::ShapeMismatch { .. }
            | Error::Numeric(_)
            | Error::MissingCacheEntry { .. }
            | Error::DuplicateCacheEntry { .. } => 4,
        }
    }
}
