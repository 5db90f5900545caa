//! Masked discrete-diffusion language modelling at desk scale.
//!
//! - [`model`]: a small pre-norm transformer with hand-written backprop and
//!   switchable causal/full attention.
//! - [`schedule`], [`noise`], [`loss`], [`padding`]: the absorbing forward
//!   process, training objectives and EOS→padding sample preparation.
//! - [`train`]: autoregressive-then-diffusion training.
//! - [`decode`]: iterative parallel unmasking (top-k and threshold selection,
//!   structure priors, generation history).
//! - [`prefill`]: prompt key/value reuse across decoding iterations.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod noise;
pub mod padding;
pub mod params;
pub mod prefill;
pub mod schedule;
pub mod sequence;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, SpecialTokens, TokenId};
pub use error::{Error, Result};
pub use model::{AttentionMode, Logits};
pub use params::{Gradients, ModelParams};
pub use sequence::{Dialogue, Role, Segment, Sequence};
