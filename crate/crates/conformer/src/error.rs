use tensorcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid byte in a text8 input, with its file offset.
    #[error("data error: invalid byte 0x{byte:02x} at offset {offset} (expected 'a'..'z' or space)")]
    InvalidByte { byte: u8, offset: usize },

    /// WAV header field that does not match the required 8-bit mono 8 kHz PCM.
    #[error("format error in field `{field}`: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("data error: {0}")]
    Data(String),

    /// Model or training configuration violates an invariant.
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Loss became NaN/Inf during optimization.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
