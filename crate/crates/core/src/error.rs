use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord { path: PathBuf, line: usize, message: String },

    #[error("image `{image_id}`: point ({row}, {col}) outside {height}x{width} image")]
    PointOutOfBounds { image_id: String, row: f64, col: f64, height: usize, width: usize },

    #[error("duplicate image_id `{image_id}` in split {split}")]
    DuplicateImage { image_id: String, split: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("loss component `{0}` is not finite")]
    NonFiniteLoss(&'static str),

    #[error("class index {class} outside 1..={classes}")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
