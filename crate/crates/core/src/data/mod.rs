//! Song records, interpretation filtering and leakage-free splits.
//!
//! A dataset file holds one JSON object per line:
//! `{song_id, title, artist, genre, lyrics, audio, interpretations: [{text, votes}]}`
//! where `audio` is a WAV path relative to the dataset file.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpretations shorter than this many characters are dropped.
pub const MIN_CHARS: usize = 256;
/// Longer interpretations are cut back to a word boundary within this many.
pub const MAX_CHARS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub text: String,
    pub votes: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongRecord {
    pub song_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub artist: String,
    #[serde(default)]
    pub genre: String,
    pub lyrics: String,
    #[serde(rename = "audio", default)]
    pub audio_path: String,
    pub interpretations: Vec<InterpretationRecord>,
}

/// Reads a line-delimited dataset. Blank lines are ignored; an empty file is
/// an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<SongRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_dataset(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<SongRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let rec: SongRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.lyrics.trim().is_empty() {
            return Err(err(format!("song `{}` has empty lyrics", rec.song_id)));
        }
        if !seen.insert(rec.song_id.clone()) {
            return Err(Error::Duplicate(rec.song_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[SongRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub(crate) fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Applies the length rule to one text: `None` when it must be dropped.
///
/// Characters are Unicode scalar values. Texts above [`MAX_CHARS`] are cut at
/// the last whitespace at or before that index and right-trimmed, so the
/// result ends in a complete word.
pub fn clip_interpretation(text: &str) -> Option<String> {
    let n = text.chars().count();
    if n < MIN_CHARS {
        return None;
    }
    if n <= MAX_CHARS {
        return Some(text.to_string());
    }
    let chars: Vec<char> = text.chars().collect();
    let cut = (0..=MAX_CHARS).rev().find(|&i| chars[i].is_whitespace())?;
    let clipped: String = chars[..cut].iter().collect();
    let clipped = clipped.trim_end().to_string();
    (clipped.chars().count() >= MIN_CHARS).then_some(clipped)
}

/// Length filtering over every interpretation; songs left without any are
/// removed.
pub fn filter_length(records: &[SongRecord]) -> Vec<SongRecord> {
    records
        .iter()
        .filter_map(|r| {
            let kept: Vec<InterpretationRecord> = r
                .interpretations
                .iter()
                .filter_map(|it| {
                    clip_interpretation(&it.text).map(|text| InterpretationRecord { text, votes: it.votes })
                })
                .collect();
            (!kept.is_empty()).then(|| SongRecord {
                interpretations: kept,
                ..r.clone()
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteMode {
    Full,
    NonNeg,
    Positive,
    /// Uniform sample of `n` interpretations.
    Random { n: usize, seed: u64 },
}

impl VoteMode {
    /// Sets the sampling seed of `Random`; other modes are returned unchanged.
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            VoteMode::Random { n, .. } => VoteMode::Random { n, seed },
            m => m,
        }
    }
}

impl FromStr for VoteMode {
    type Err = Error;

    /// `full`, `nonneg`, `positive` or `random:<n>` (seed 0).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(VoteMode::Full),
            "nonneg" => Ok(VoteMode::NonNeg),
            "positive" => Ok(VoteMode::Positive),
            _ => s
                .strip_prefix("random:")
                .and_then(|n| n.parse().ok())
                .map(|n| VoteMode::Random { n, seed: 0 })
                .ok_or_else(|| Error::Config(format!("unknown dataset mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for VoteMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VoteMode::Full => f.write_str("full"),
            VoteMode::NonNeg => f.write_str("nonneg"),
            VoteMode::Positive => f.write_str("positive"),
            VoteMode::Random { n, .. } => write!(f, "random:{n}"),
        }
    }
}

fn keep_where(records: &[SongRecord], keep: impl Fn(usize, &InterpretationRecord) -> bool) -> Vec<SongRecord> {
    let mut flat = 0;
    records
        .iter()
        .filter_map(|r| {
            let kept: Vec<InterpretationRecord> = r
                .interpretations
                .iter()
                .filter(|it| {
                    flat += 1;
                    keep(flat - 1, it)
                })
                .cloned()
                .collect();
            (!kept.is_empty()).then(|| SongRecord {
                interpretations: kept,
                ..r.clone()
            })
        })
        .collect()
}

/// Vote-based subsets. Order is preserved; songs with no surviving
/// interpretation are removed.
pub fn filter_votes(records: &[SongRecord], mode: VoteMode) -> Result<Vec<SongRecord>> {
    Ok(match mode {
        VoteMode::Full => records.to_vec(),
        VoteMode::NonNeg => keep_where(records, |_, it| it.votes >= 0),
        VoteMode::Positive => keep_where(records, |_, it| it.votes > 0),
        VoteMode::Random { n, seed } => {
            let total: usize = records.iter().map(|r| r.interpretations.len()).sum();
            if n > total {
                return Err(Error::Config(format!("random subset of {n} requested from {total} interpretations")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chosen: HashSet<usize> = index::sample(&mut rng, total, n).into_iter().collect();
            keep_where(records, |i, _| chosen.contains(&i))
        }
    })
}

/// An interpretation addressed by song and position within that song.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub song_id: String,
    pub index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ItemRef>,
    pub valid: Vec<ItemRef>,
    pub test: Vec<ItemRef>,
}

impl DatasetSplit {
    fn songs(items: &[ItemRef]) -> BTreeSet<&str> {
        items.iter().map(|i| i.song_id.as_str()).collect()
    }

    /// Errors unless no test song contributes to train or valid.
    pub fn check_disjoint(&self) -> Result<()> {
        let test = Self::songs(&self.test);
        for (name, part) in [("train", &self.train), ("valid", &self.valid)] {
            if let Some(s) = Self::songs(part).intersection(&test).next() {
                return Err(Error::State(format!("song `{s}` appears in both test and {name}")));
            }
        }
        Ok(())
    }
}

/// Every interpretation of a listed song goes to test; the rest is shuffled
/// with `seed` and the first `round(valid_fraction * n)` items become valid.
pub fn split_dataset(
    records: &[SongRecord],
    valid_fraction: f64,
    test_song_ids: &[String],
    seed: u64,
) -> Result<DatasetSplit> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::Config(format!("valid_fraction must lie in (0, 1), got {valid_fraction}")));
    }
    let test_ids: HashSet<&str> = test_song_ids.iter().map(String::as_str).collect();
    let known: HashSet<&str> = records.iter().map(|r| r.song_id.as_str()).collect();
    for id in test_song_ids {
        if !known.contains(id.as_str()) {
            warn!("test song `{id}` not present in the dataset");
        }
    }
    let mut split = DatasetSplit::default();
    let mut rest = Vec::new();
    for r in records {
        for index in 0..r.interpretations.len() {
            let item = ItemRef {
                song_id: r.song_id.clone(),
                index,
            };
            if test_ids.contains(r.song_id.as_str()) {
                split.test.push(item);
            } else {
                rest.push(item);
            }
        }
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (valid_fraction * rest.len() as f64).round() as usize;
    split.train = rest.split_off(n_valid);
    split.valid = rest;
    split.check_disjoint()?;
    Ok(split)
}

/// Reads a list of song ids, one per line; blank lines and surrounding
/// whitespace are ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// A flattened (lyrics, audio, interpretation) training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub song_id: String,
    pub lyrics: String,
    pub audio: String,
    pub interpretation: String,
    pub votes: i64,
}

/// Resolves item references against the records they were built from.
pub fn materialize(records: &[SongRecord], items: &[ItemRef]) -> Result<Vec<PairRecord>> {
    let by_id: BTreeMap<&str, &SongRecord> = records.iter().map(|r| (r.song_id.as_str(), r)).collect();
    items
        .iter()
        .map(|it| {
            let r = by_id
                .get(it.song_id.as_str())
                .ok_or_else(|| Error::State(format!("unknown song `{}`", it.song_id)))?;
            let interp = r
                .interpretations
                .get(it.index)
                .ok_or_else(|| Error::State(format!("song `{}` has no interpretation {}", it.song_id, it.index)))?;
            Ok(PairRecord {
                song_id: r.song_id.clone(),
                lyrics: r.lyrics.clone(),
                audio: r.audio_path.clone(),
                interpretation: interp.text.clone(),
                votes: interp.votes,
            })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    read_jsonl(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSizes {
    pub full: usize,
    pub nonneg: usize,
    pub positive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub songs: usize,
    pub interpretations: usize,
    /// Mean whitespace-delimited word count of interpretations.
    pub mean_words: f64,
    pub genres: BTreeMap<String, usize>,
    /// Interpretation counts per vote subset.
    pub subsets: SubsetSizes,
}

pub fn corpus_stats(records: &[SongRecord]) -> CorpusStats {
    let all = || records.iter().flat_map(|r| &r.interpretations);
    let interpretations = all().count();
    let words: usize = all().map(|it| it.text.split_whitespace().count()).sum();
    let mut genres = BTreeMap::new();
    for r in records {
        *genres.entry(r.genre.clone()).or_insert(0) += 1;
    }
    CorpusStats {
        songs: records.len(),
        interpretations,
        mean_words: if interpretations == 0 { 0.0 } else { words as f64 / interpretations as f64 },
        genres,
        subsets: SubsetSizes {
            full: interpretations,
            nonneg: all().filter(|it| it.votes >= 0).count(),
            positive: all().filter(|it| it.votes > 0).count(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn song(id: &str, interps: &[(&str, i64)]) -> SongRecord {
        SongRecord {
            song_id: id.into(),
            title: format!("title {id}"),
            artist: "artist".into(),
            genre: "rock".into(),
            lyrics: format!("lyrics of {id}"),
            audio_path: format!("{id}.wav"),
            interpretations: interps
                .iter()
                .map(|&(t, v)| InterpretationRecord { text: t.into(), votes: v })
                .collect(),
        }
    }

    #[test]
    fn parse_cases() {
        assert!(parse_dataset("", "x").unwrap().is_empty());
        let line = serde_json::to_string(&song("a", &[("t", 1)])).unwrap();
        assert!(line.contains("\"audio\":\"a.wav\""));
        assert_eq!(parse_dataset(&line, "x").unwrap().len(), 1);
        let dup = format!("{line}\n{line}\n");
        assert!(matches!(parse_dataset(&dup, "x"), Err(Error::Duplicate(_))));
        let bad = format!("{line}\n{{not json\n");
        match parse_dataset(&bad, "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn length_boundaries() {
        assert_eq!(clip_interpretation(&"a".repeat(255)), None);
        let ok = "b".repeat(256);
        assert_eq!(clip_interpretation(&ok).as_deref(), Some(ok.as_str()));
        let exact = "c".repeat(MAX_CHARS);
        assert_eq!(clip_interpretation(&exact).unwrap().chars().count(), MAX_CHARS);
    }

    #[test]
    fn truncation_keeps_whole_words() {
        // words of 9 letters plus a space: index 2048 falls inside a word
        let text = "abcdefghi ".repeat(210);
        assert_eq!(text.chars().count(), 2100);
        assert!(!text.chars().nth(MAX_CHARS).unwrap().is_whitespace());
        let out = clip_interpretation(&text).unwrap();
        assert_eq!(out.chars().count(), 2039);
        assert!(out.ends_with("abcdefghi"));
        // no whitespace at all: no complete word can be kept
        assert_eq!(clip_interpretation(&"x".repeat(3000)), None);
    }

    #[test]
    fn vote_subsets() {
        let recs = vec![song("s", &[("neg", -1), ("zero", 0), ("two", 2)])];
        let texts = |m: VoteMode| -> Vec<String> {
            filter_votes(&recs, m).unwrap().iter().flat_map(|r| r.interpretations.iter().map(|i| i.text.clone())).collect()
        };
        assert_eq!(texts(VoteMode::Positive), ["two"]);
        assert_eq!(texts(VoteMode::NonNeg), ["zero", "two"]);
        assert_eq!(texts(VoteMode::Full).len(), 3);
        assert_eq!(texts(VoteMode::Random { n: 2, seed: 5 }).len(), 2);
        assert!(filter_votes(&recs, VoteMode::Random { n: 4, seed: 5 }).is_err());
        assert_eq!("random:12".parse::<VoteMode>().unwrap(), VoteMode::Random { n: 12, seed: 0 });
        assert!("random:x".parse::<VoteMode>().is_err());
        assert_eq!(VoteMode::Random { n: 3, seed: 9 }.to_string(), "random:3");
    }

    #[test]
    fn split_cases() {
        let recs: Vec<SongRecord> = (0..10).map(|i| song(&format!("s{i}"), &[("a", 1), ("b", 2)])).collect();
        let none = split_dataset(&recs, 0.2, &[], 1).unwrap();
        assert!(none.test.is_empty());
        assert_eq!(none.valid.len(), 4);
        assert_eq!(none.train.len(), 16);
        let test = vec!["s3".to_string(), "missing".to_string()];
        let sp = split_dataset(&recs, 0.2, &test, 1).unwrap();
        assert_eq!(sp.test.len(), 2);
        assert!(sp.train.iter().chain(&sp.valid).all(|i| i.song_id != "s3"));
        assert_eq!(split_dataset(&recs, 0.2, &test, 1).unwrap(), sp);
        assert!(split_dataset(&recs, 0.0, &test, 1).is_err());
        assert!(split_dataset(&recs, 1.0, &test, 1).is_err());
        let pairs = materialize(&recs, &sp.test).unwrap();
        assert_eq!(pairs[0].audio, "s3.wav");
    }

    #[test]
    fn stats_counts() {
        let recs = vec![
            song("a", &[("one two three four five six seven eight nine ten", 3)]),
            song("b", &[("x y", -2), ("z", 0)]),
        ];
        let s = corpus_stats(&recs);
        assert_eq!((s.songs, s.interpretations), (2, 3));
        assert!((s.mean_words - 13.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.genres["rock"], 2);
        assert_eq!(s.subsets, SubsetSizes { full: 3, nonneg: 2, positive: 1 });
        assert_eq!(corpus_stats(&recs[..1]).mean_words, 10.0);
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-zé]{1,14}"
    }

    fn text() -> impl Strategy<Value = String> {
        (proptest::collection::vec(word(), 1..400), proptest::collection::vec(prop::sample::select(vec![" ", "  ", "\n", "\t"]), 400))
            .prop_map(|(words, seps)| words.iter().zip(seps).map(|(w, s)| format!("{w}{s}")).collect::<String>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clipped_texts_obey_bounds(t in text()) {
            if let Some(out) = clip_interpretation(&t) {
                let n = out.chars().count();
                prop_assert!((MIN_CHARS..=MAX_CHARS).contains(&n));
                prop_assert!(t.starts_with(&out));
                // the last word of the output is a whole word of the input
                let last = out.split_whitespace().last().unwrap();
                let orig_words: Vec<&str> = t.split_whitespace().collect();
                let k = out.split_whitespace().count();
                prop_assert_eq!(orig_words[k - 1], last);
            }
        }

        #[test]
        fn subsets_are_nested(votes in proptest::collection::vec(proptest::collection::vec(-3i64..4, 1..5), 1..8)) {
            let recs: Vec<SongRecord> = votes
                .iter()
                .enumerate()
                .map(|(i, vs)| SongRecord {
                    interpretations: vs.iter().enumerate().map(|(j, &v)| InterpretationRecord { text: format!("{i}-{j}"), votes: v }).collect(),
                    ..song(&format!("s{i}"), &[])
                })
                .collect();
            let ids = |m: VoteMode| -> BTreeSet<String> {
                filter_votes(&recs, m).unwrap().iter().flat_map(|r| r.interpretations.iter().map(|i| i.text.clone())).collect()
            };
            let (full, nonneg, pos) = (ids(VoteMode::Full), ids(VoteMode::NonNeg), ids(VoteMode::Positive));
            prop_assert!(pos.is_subset(&nonneg));
            prop_assert!(nonneg.is_subset(&full));
        }

        #[test]
        fn splits_never_leak(n_songs in 1usize..20, test_mask in any::<u32>(), seed in any::<u64>(), frac in 0.05f64..0.95) {
            let recs: Vec<SongRecord> = (0..n_songs).map(|i| song(&format!("s{i}"), &[("a", 0), ("b", 1), ("c", 2)])).collect();
            let test: Vec<String> = (0..n_songs).filter(|i| test_mask >> i & 1 == 1).map(|i| format!("s{i}")).collect();
            let sp = split_dataset(&recs, frac, &test, seed).unwrap();
            prop_assert!(sp.check_disjoint().is_ok());
            prop_assert_eq!(sp.train.len() + sp.valid.len() + sp.test.len(), 3 * n_songs);
            prop_assert_eq!(sp.test.len(), 3 * test.len());
        }
    }
}
