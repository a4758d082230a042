//! Convolutional sequence-to-sequence answer generation for visual question
//! answering, with hint-token fusion and visual patch features.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, Adam.
//! - [`vocab`]: normalization, tokenization, vocabulary.
//! - [`fusion`]: combined question+hint sequences and visual fusion.
//! - [`model`]: the encoder-decoder, greedy decoding, checkpoints.
//! - [`pipeline`]: dataset samples to model-ready inputs.
//! - [`train`]: batching and the optimization loop.
//! - [`metrics`]: token F1, BLEU and descriptive statistics.
//! - [`data`]: file formats and the synthetic data generator.
//! - [`verify`]: finite-difference gradient checks.

pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
pub use fusion::{CombinedSequence, HintMode, HintSet, VisualFeatures};
pub use model::{ConvS2S, DecodedAnswer, EncoderState, ModelConfig};
pub use tensor::Tensor;
pub use vocab::{Language, TokenizedText, Vocabulary};
