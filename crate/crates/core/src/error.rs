use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("scene has {0} instances, more than the 65534 that fit a 16-bit id")]
    TooManyInstances(usize),

    #[error("probability vector at (t={t}, h={h}, w={w}) is not a simplex: {reason}")]
    Simplex {
        t: usize,
        h: usize,
        w: usize,
        reason: String,
    },

    #[error("instance id {0} has no class entry")]
    UnknownInstance(u16),

    #[error("label {label} at ({h}, {w}) is out of range for {classes} classes")]
    LabelOutOfRange {
        label: u8,
        h: usize,
        w: usize,
        classes: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimensions(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("no ground truth for prediction stem(s): {}", .0.join(", "))]
    MissingPairs(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, source: Error) -> Self {
        Error::InFile {
            path: path.into(),
            source: Box::new(source),
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
