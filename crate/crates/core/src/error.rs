use thiserror::Error;

/// Errors raised by schedule construction, attention kernels, masks and the harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("scale {scale} out of range (schedule has {num_scales} scales)")]
    ScaleOutOfRange { scale: usize, num_scales: usize },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty index list for batch {batch}, head {head}, query block {block}")]
    EmptyIndexList { batch: usize, head: usize, block: usize },

    #[error("query-block row {row} of the block mask has no active blocks")]
    EmptyMaskRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
