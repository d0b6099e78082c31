//! Audio-informed lyric interpretation.
//!
//! A transformer encoder-decoder whose last encoder layers receive a
//! cross-modal attention summary of a CNN + self-attention audio encoder,
//! together with everything needed to train and evaluate it: log-mel
//! features, a byte-level BPE tokenizer, dataset filtering, AdaFactor
//! training, ROUGE/METEOR metrics and a retrieval benchmark.

pub mod error;
pub mod audio;
pub mod data;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
