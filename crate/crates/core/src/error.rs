use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A sign tensor contained something other than -1 or +1.
    #[error("invalid value {value} at flat index {index}: expected -1 or +1")]
    InvalidValue { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// gamma == 0 makes the threshold undefined; such channels must be pruned upstream.
    #[error("layer {layer} channel {channel} has gamma = 0 and must be pruned before deployment")]
    PrunableChannel { layer: usize, channel: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
