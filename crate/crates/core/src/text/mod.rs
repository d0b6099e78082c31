//! Byte-level BPE tokenizer and padded token batches.

mod batch;
mod bpe;

pub use batch::TokenBatch;
pub use bpe::{EncodedRow, Vocabulary, BOS, EOS, MIN_VOCAB, PAD, UNK};

/// Default vocabulary cap for trained tokenizers.
pub const DEFAULT_VOCAB_CAP: usize = 8192;
