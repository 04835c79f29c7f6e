use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} at index {index} is outside [{min}, {max}]")]
    Range {
        index: usize,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("window out of bounds: {0}")]
    Bounds(String),

    #[error("accumulator width {0} is outside the supported range [8, 32]")]
    Width(u32),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("PE mode does not match operand type: {0}")]
    ModeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
