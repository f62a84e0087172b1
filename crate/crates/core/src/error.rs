use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at frame {frame}: {message}")]
    Format { frame: usize, message: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("video {video}: {source}")]
    Video {
        video: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Validation,
    Internal,
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }

    pub fn in_frame(self, frame: usize) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            other => Error::Frame {
                frame,
                source: Box::new(other),
            },
        }
    }

    pub fn in_video(self, video: &str) -> Self {
        Error::Video {
            video: video.to_string(),
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::Usage(_) => Category::Config,
            Error::Io(_) | Error::Path { .. } => Category::Io,
            Error::Shape(_) | Error::Format { .. } | Error::Parse { .. } | Error::Validation(_) => {
                Category::Validation
            }
            Error::Frame { source, .. } | Error::Video { source, .. } => source.category(),
        }
    }
}
