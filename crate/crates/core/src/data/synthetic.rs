//! Seeded toy corpora in which part of each interpretation can only be
//! recovered from the audio.
//!
//! Every song is a pure tone in one of [`TONE_CLASSES`] plus a little noise.
//! Its lyrics name a topic; its interpretations mention the topic and the
//! phrase attached to the tone's frequency band.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_dataset, InterpretationRecord, SongRecord};
use crate::audio::{write_wav, AudioClip, SAMPLE_RATE};
use crate::error::Result;

pub struct ToneClass {
    pub freq_hz: f64,
    pub phrase: &'static str,
}

pub const TONE_CLASSES: [ToneClass; 3] = [
    ToneClass {
        freq_hz: 220.0,
        phrase: "a slow heavy low drone",
    },
    ToneClass {
        freq_hz: 1000.0,
        phrase: "a steady bright middle hum",
    },
    ToneClass {
        freq_hz: 3500.0,
        phrase: "a thin sharp high whistle",
    },
];

pub const TOPICS: [&str; 6] = ["rain", "trains", "winter", "mothers", "rivers", "fire"];

const FILLER: [&str; 4] = [
    "The narrator keeps coming back to the same image until it stops meaning anything at all.",
    "Each verse repeats the last one with a small change that the listener only notices later.",
    "Nothing is resolved by the end and the chorus simply fades out under the music.",
    "Some listeners hear regret in it while others hear a quiet kind of relief.",
];

#[derive(Clone, Debug)]
pub struct SyntheticSong {
    pub record: SongRecord,
    pub clip: AudioClip,
    pub class: usize,
    pub topic: usize,
    /// Short interpretation: topic plus tone phrase.
    pub core: String,
}

#[derive(Clone, Debug)]
pub struct SyntheticOptions {
    pub songs: usize,
    pub seconds: f64,
    pub seed: u64,
    /// Pad interpretations past the minimum-length filter with filler sentences.
    pub long_interpretations: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            songs: 24,
            seconds: 1.0,
            seed: 0,
            long_interpretations: true,
        }
    }
}

pub fn core_interpretation(topic: usize, class: usize) -> String {
    format!("a song about {} over {}", TOPICS[topic], TONE_CLASSES[class].phrase)
}

pub fn lyrics_for(topic: usize, rng: &mut impl Rng) -> String {
    let t = TOPICS[topic];
    let lines = [
        format!("i remember {t}"),
        format!("{t} in the morning"),
        format!("all the {t} we had"),
        format!("say it like {t}"),
    ];
    let n = rng.gen_range(2..=4);
    lines[..n].join("\n")
}

pub fn tone(class: usize, seconds: f64, rng: &mut impl Rng) -> AudioClip {
    let f = TONE_CLASSES[class].freq_hz * rng.gen_range(0.95..1.05);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let samples = (0..n)
        .map(|i| {
            let s = 0.5 * (std::f64::consts::TAU * f * i as f64 / SAMPLE_RATE as f64 + phase).sin();
            (s + rng.gen_range(-0.01..0.01)) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

pub fn generate(opts: &SyntheticOptions) -> Vec<SyntheticSong> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.songs)
        .map(|i| {
            let class = rng.gen_range(0..TONE_CLASSES.len());
            let topic = rng.gen_range(0..TOPICS.len());
            let core = core_interpretation(topic, class);
            let n_interp = rng.gen_range(1..=3);
            let interpretations = (0..n_interp)
                .map(|_| {
                    let text = if opts.long_interpretations {
                        let mut t = format!("This is {core}.");
                        while t.chars().count() < 300 {
                            t.push(' ');
                            t.push_str(FILLER[rng.gen_range(0..FILLER.len())]);
                        }
                        t
                    } else {
                        core.clone()
                    };
                    InterpretationRecord {
                        text,
                        votes: rng.gen_range(-2..=5),
                    }
                })
                .collect();
            let id = format!("song{i:04}");
            SyntheticSong {
                record: SongRecord {
                    song_id: id.clone(),
                    title: format!("{} {i}", TOPICS[topic]),
                    artist: format!("artist {}", i % 5),
                    genre: ["rock", "folk", "pop"][class].to_string(),
                    lyrics: lyrics_for(topic, &mut rng),
                    audio_path: format!("audio/{id}.wav"),
                    interpretations,
                },
                clip: tone(class, opts.seconds, &mut rng),
                class,
                topic,
                core,
            }
        })
        .collect()
}

/// Writes `dataset.jsonl`, the WAV files under `audio/` and `test_ids.txt`
/// (every fourth song) into `dir`.
pub fn write_corpus(dir: &Path, opts: &SyntheticOptions) -> Result<Vec<SyntheticSong>> {
    let songs = generate(opts);
    std::fs::create_dir_all(dir.join("audio"))?;
    for s in &songs {
        write_wav(&dir.join(&s.record.audio_path), &s.clip)?;
    }
    let records: Vec<SongRecord> = songs.iter().map(|s| s.record.clone()).collect();
    write_dataset(&dir.join("dataset.jsonl"), &records)?;
    let test_ids: String = songs.iter().step_by(4).map(|s| format!("{}\n", s.record.song_id)).collect();
    std::fs::write(dir.join("test_ids.txt"), test_ids)?;
    Ok(songs)
}
