//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dsp: {0}")]
    Dsp(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("nn: {0}")]
    Nn(String),

    #[error("quantization: {0}")]
    Quant(String),

    #[error("pruning: {0}")]
    Prune(String),

    #[error("integer engine: {0}")]
    IntEngine(String),

    #[error("i32 accumulator overflow in {0}")]
    AccumulatorOverflow(&'static str),

    #[error("model container: {0}")]
    Container(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training: {0}")]
    Train(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
