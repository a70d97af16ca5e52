use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Malformed document. `field` is the serde path to the offending field.
    #[error("schema error in {file}: {field}: {message}")]
    Schema {
        file: String,
        field: String,
        message: String,
    },

    /// Semantically invalid annotation or request; `location` names the offending item.
    #[error("validation error at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("shape mismatch in {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split error: series `{series}` has {pages} pages, needs more than {required}")]
    SeriesTooSmall {
        series: String,
        pages: usize,
        required: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("too many characters: {got} exceeds the cap of {cap}")]
    TooManyCharacters { got: usize, cap: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("frozen parameter contract violated: {0}")]
    Frozen(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            message: message.into(),
        }
    }
}
