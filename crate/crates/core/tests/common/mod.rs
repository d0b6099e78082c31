//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::rc::Rc;

use lyricfusion::audio::featurize;
use lyricfusion::data::synthetic::{generate, SyntheticOptions, SyntheticSong};
use lyricfusion::model::{Example, ModelConfig};
use lyricfusion::text::Vocabulary;

/// Short-interpretation synthetic songs with their features and a vocabulary
/// fitted to their text.
pub struct Corpus {
    pub songs: Vec<SyntheticSong>,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

pub fn corpus(songs: usize, seed: u64, vocab_cap: usize, config: impl Fn(usize) -> ModelConfig) -> Corpus {
    let songs = generate(&SyntheticOptions {
        songs,
        seconds: 1.0,
        seed,
        long_interpretations: false,
    });
    let text: Vec<&str> = songs
        .iter()
        .flat_map(|s| [s.record.lyrics.as_str(), s.core.as_str()])
        .collect();
    let vocab = Vocabulary::build(text, vocab_cap).unwrap();
    let cfg = config(vocab.len());
    let examples = songs
        .iter()
        .map(|s| {
            let mel = Rc::new(featurize(&s.clip).unwrap());
            Example::encode(&vocab, &cfg, &s.record.lyrics, &s.core, Some(mel)).unwrap()
        })
        .collect();
    Corpus { songs, vocab, examples }
}
