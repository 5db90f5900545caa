use thiserror::Error;

use crate::decode::PartialDecode;
use crate::model::AttentionMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("token id {id} at position {pos} is outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, pos: usize, vocab: usize },
    #[error("cache built under {cached:?} attention used with {requested:?}")]
    CacheModeMismatch { cached: AttentionMode, requested: AttentionMode },
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("decode stopped after {} iterations with {} masked slots left", .0.state.iteration, .0.state.masked_slots().len())]
    IncompleteDecode(Box<PartialDecode>),
    #[error("training diverged at step {step} (samples {samples:?}): {detail}")]
    Diverged { step: usize, samples: Vec<usize>, detail: String },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
