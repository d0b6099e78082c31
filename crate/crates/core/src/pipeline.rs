//! File-level workflow: preprocess, featurize, train, generate, evaluate,
//! retrieve and stats. Each step reads and writes plain files so steps can be
//! run independently; all outputs are deterministic given inputs and seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::audio::{featurize as log_mel_features, read_wav, MelSpectrogram};
use crate::data::{
    self, corpus_stats, filter_length, filter_votes, load_dataset, materialize, read_id_list, split_dataset,
    CorpusStats, PairRecord, VoteMode,
};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{DecodeMode, Example, FusionModel, ModelConfig};
use crate::retrieval::{
    evaluate_retrieval, generate_database, make_queries, Embedder, EmbeddingIndex, EncoderEmbedder, RetrievalReport,
    SongInput, TfIdfEmbedder,
};
use crate::tensor::checkpoint::{read_container, write_container};
use crate::tensor::Tensor;
use crate::text::{Vocabulary, DEFAULT_VOCAB_CAP};
use crate::train::{fit, FitOutcome, Rouge1Validator, RunDir, TrainConfig, BEST_DIR};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_PAIRS: &str = "train.jsonl";
pub const VALID_PAIRS: &str = "valid.jsonl";
pub const TEST_PAIRS: &str = "test.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const STATS_FILE: &str = "stats.json";

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub mode: String,
    pub before: CorpusStats,
    pub after: CorpusStats,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Length filter, vote filter on non-test songs, then the split. Writes
/// `train.jsonl`, `valid.jsonl`, `test.jsonl`, `split.json` and `stats.json`.
///
/// Test songs keep every length-filtered interpretation whatever the mode,
/// so one test set serves models trained on any subset. Audio paths in the
/// pair files are resolved against the dataset's directory.
pub fn preprocess(
    dataset: &Path,
    test_ids: Option<&Path>,
    mode: VoteMode,
    valid_fraction: f64,
    seed: u64,
    out: &Path,
) -> Result<PreprocessSummary> {
    let records = load_dataset(dataset)?;
    let test_ids = test_ids.map(read_id_list).transpose()?.unwrap_or_default();
    let filtered = filter_length(&records);
    let (test_recs, rest): (Vec<_>, Vec<_>) = filtered.into_iter().partition(|r| test_ids.contains(&r.song_id));
    let mut kept = filter_votes(&rest, mode.with_seed(seed))?;
    kept.extend(test_recs);
    let base = dataset.parent().unwrap_or(Path::new(""));
    for r in &mut kept {
        r.audio_path = base.join(&r.audio_path).display().to_string();
    }
    let split = split_dataset(&kept, valid_fraction, &test_ids, seed)?;
    std::fs::create_dir_all(out)?;
    for (name, items) in [(TRAIN_PAIRS, &split.train), (VALID_PAIRS, &split.valid), (TEST_PAIRS, &split.test)] {
        data::write_pairs(&out.join(name), &materialize(&kept, items)?)?;
    }
    write_json(&out.join(SPLIT_FILE), &split)?;
    let summary = PreprocessSummary {
        mode: mode.to_string(),
        before: corpus_stats(&records),
        after: corpus_stats(&kept),
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
    };
    write_json(&out.join(STATS_FILE), &summary)?;
    Ok(summary)
}

pub fn stats(dataset: &Path) -> Result<CorpusStats> {
    Ok(corpus_stats(&load_dataset(dataset)?))
}

/// Computes the log-mel spectrogram of every song's audio (paths relative to
/// the dataset file) with `workers` threads and caches them in a tensor
/// container keyed by song id. Returns the number of songs featurized.
pub fn featurize(dataset: &Path, out: &Path, workers: usize) -> Result<usize> {
    let records = load_dataset(dataset)?;
    let base = dataset.parent().unwrap_or(Path::new("")).to_path_buf();
    let jobs: Vec<(String, PathBuf)> = records
        .iter()
        .map(|r| (r.song_id.clone(), base.join(&r.audio_path)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Tensor<f32>>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, path)) = jobs.get(i) else { break };
                let mel = read_wav(path).and_then(|clip| log_mel_features(&clip)).map(MelSpectrogram::into_values);
                results.lock().expect("worker panicked")[i] = Some(mel);
            });
        }
    });
    let mut tensors = Vec::with_capacity(jobs.len());
    for ((id, path), r) in jobs.iter().zip(results.into_inner().expect("worker panicked")) {
        let t = r.expect("every job ran").map_err(|e| match e {
            Error::MissingInput(p) => Error::MissingInput(p),
            e => Error::State(format!("{}: {e}", path.display())),
        })?;
        tensors.push((id.as_str(), t));
    }
    write_container(out, tensors.iter().map(|(id, t)| (*id, t)))?;
    Ok(tensors.len())
}

pub type FeatureCache = HashMap<String, Rc<MelSpectrogram>>;

pub fn load_features(dir: &Path) -> Result<FeatureCache> {
    read_container(dir)?
        .into_iter()
        .map(|(id, t)| Ok((id, Rc::new(MelSpectrogram::new(t)?))))
        .collect()
}

/// Encodes pairs for `config`. Audio is attached only when the model fuses
/// it, in which case every song needs cached features.
pub fn examples(
    pairs: &[PairRecord],
    vocab: &Vocabulary,
    config: &ModelConfig,
    features: Option<&FeatureCache>,
) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| {
            let audio = if config.uses_audio() {
                let cache = features.ok_or_else(|| Error::Config("the model fuses audio; pass a features cache".into()))?;
                Some(
                    cache
                        .get(&p.song_id)
                        .cloned()
                        .ok_or_else(|| Error::State(format!("no cached features for song `{}`", p.song_id)))?,
                )
            } else {
                None
            };
            Example::encode(vocab, config, &p.lyrics, &p.interpretation, audio)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub profile: String,
    pub text_only: bool,
    pub vocab_cap: usize,
    pub train: TrainConfig,
    /// Start from this checkpoint instead of a fresh initialisation.
    pub init: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            profile: "toy".into(),
            text_only: false,
            vocab_cap: DEFAULT_VOCAB_CAP,
            train: TrainConfig::default(),
            init: None,
        }
    }
}

/// Fits a vocabulary on the training pairs' text, trains, and leaves in `out`:
/// `history.jsonl` and `best/` (model, parameters and `vocab.txt`).
pub fn train(
    train_pairs: &Path,
    valid_pairs: &Path,
    features: Option<&Path>,
    out: &Path,
    opts: &TrainOptions,
) -> Result<FitOutcome> {
    let train_pairs = data::read_pairs(train_pairs)?;
    let valid_pairs = data::read_pairs(valid_pairs)?;
    let (mut model, vocab) = match &opts.init {
        Some(dir) => (FusionModel::load(dir)?, Vocabulary::load(&dir.join(VOCAB_FILE))?),
        None => {
            let text = train_pairs.iter().flat_map(|p| [p.lyrics.as_str(), p.interpretation.as_str()]);
            let vocab = Vocabulary::build(text, opts.vocab_cap)?;
            let mut config = ModelConfig::profile(&opts.profile, vocab.len())?;
            if opts.text_only {
                config = config.text_only();
            }
            (FusionModel::new(config, opts.train.seed)?, vocab)
        }
    };
    let cache = match (model.config().uses_audio(), features) {
        (true, Some(dir)) => Some(load_features(dir)?),
        (true, None) => return Err(Error::Config("the model fuses audio; pass a features cache".into())),
        (false, _) => None,
    };
    let train_ex = examples(&train_pairs, &vocab, model.config(), cache.as_ref())?;
    let valid_ex = examples(&valid_pairs, &vocab, model.config(), cache.as_ref())?;
    let run = RunDir(out.to_path_buf());
    std::fs::create_dir_all(run.best())?;
    vocab.save(&run.best().join(VOCAB_FILE))?;
    info!(
        "training {} trainable values on {} pairs ({} validation)",
        model.params().num_trainable_values(),
        train_ex.len(),
        valid_ex.len()
    );
    let mut validator = Rouge1Validator {
        vocab: &vocab,
        examples: &valid_ex,
        max_new: opts.train.valid_max_new,
    };
    fit(&mut model, &train_ex, &opts.train, &mut validator, Some(&run)).map_err(|f| {
        warn!("training aborted; {} epoch(s) recorded in {}", f.history.len(), run.history().display());
        f.error
    })
}

/// A trained model with its vocabulary.
pub struct Checkpoint {
    pub model: FusionModel<f32>,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    /// Accepts either a checkpoint directory or a training run directory
    /// (whose `best/` is used).
    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let dir = if dir.join(BEST_DIR).is_dir() { dir.join(BEST_DIR) } else { dir.to_path_buf() };
        Ok(Checkpoint {
            model: FusionModel::load(&dir)?,
            vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
        })
    }

    pub fn generate(&self, lyrics: &str, audio: Option<&MelSpectrogram>, mode: DecodeMode, max_new: usize) -> Result<String> {
        let audio = if self.model.config().uses_audio() { audio } else { None };
        if self.model.config().uses_audio() && audio.is_none() {
            return Err(Error::Config("the model fuses audio; supply audio for generation".into()));
        }
        self.model.generate(&self.vocab, lyrics, audio, mode, max_new)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub song_id: String,
    pub reference: String,
    pub generated: String,
}

/// Generates for every pair in `pairs`, in order.
pub fn generate_pairs(
    ckpt: &Checkpoint,
    pairs: &[PairRecord],
    features: Option<&FeatureCache>,
    mode: DecodeMode,
    max_new: usize,
) -> Result<Vec<Generation>> {
    pairs
        .iter()
        .map(|p| {
            let audio = features.and_then(|f| f.get(&p.song_id)).map(|m| m.as_ref());
            Ok(Generation {
                song_id: p.song_id.clone(),
                reference: p.interpretation.clone(),
                generated: ckpt.generate(&p.lyrics, audio, mode, max_new)?,
            })
        })
        .collect()
}

pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    data::write_jsonl(path, gens)
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    data::read_jsonl(path)
}

/// Non-empty lines of a UTF-8 text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?.lines().map(String::from).collect())
}

pub fn evaluate(candidates: &[String], references: &[String]) -> Result<MetricReport> {
    MetricReport::evaluate(candidates, references)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedderKind {
    TfIdf,
    Encoder,
}

impl std::str::FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(EmbedderKind::TfIdf),
            "encoder" => Ok(EmbedderKind::Encoder),
            _ => Err(Error::Config(format!("unknown embedder `{s}` (expected tfidf or encoder)"))),
        }
    }
}

/// Where retrieval database texts come from.
pub enum Database<'a> {
    /// Generate one interpretation per song with the checkpoint (greedy).
    Generate {
        ckpt: &'a Checkpoint,
        features: Option<&'a FeatureCache>,
        max_new: usize,
    },
    /// Use previously generated texts, keyed by song id (first one wins).
    Texts(&'a [Generation]),
}

/// Builds the index over the songs of `pairs`, draws one query sentence per
/// song from its reference interpretations and scores MRR. Writes the index
/// under `out/index`, the queries to `out/queries.jsonl` and the report to
/// `out/report.json`.
pub fn retrieve(
    pairs: &[PairRecord],
    database: Database<'_>,
    embedder: EmbedderKind,
    checkpoint_for_encoder: Option<&Checkpoint>,
    seed: u64,
    out: &Path,
) -> Result<RetrievalReport> {
    let mut seen = std::collections::HashSet::new();
    let songs: Vec<&PairRecord> = pairs.iter().filter(|p| seen.insert(p.song_id.as_str())).collect();
    let docs: Vec<(String, String)> = match database {
        Database::Generate { ckpt, features, max_new } => {
            let inputs: Vec<SongInput<'_>> = songs
                .iter()
                .map(|p| SongInput {
                    song_id: &p.song_id,
                    lyrics: &p.lyrics,
                    audio: features.and_then(|f| f.get(&p.song_id)).map(|m| m.as_ref()),
                })
                .collect();
            generate_database(&ckpt.model, &ckpt.vocab, &inputs, DecodeMode::Greedy, max_new)
        }
        Database::Texts(gens) => {
            let mut by_id: HashMap<&str, &str> = HashMap::new();
            for g in gens {
                by_id.entry(g.song_id.as_str()).or_insert(g.generated.as_str());
            }
            songs
                .iter()
                .filter_map(|p| by_id.get(p.song_id.as_str()).map(|t| (p.song_id.clone(), t.to_string())))
                .collect()
        }
    };
    let tfidf;
    let encoder;
    let emb: &dyn Embedder = match embedder {
        EmbedderKind::TfIdf => {
            let texts: Vec<&str> = docs.iter().map(|(_, t)| t.as_str()).collect();
            tfidf = TfIdfEmbedder::fit(&texts);
            tfidf.save(&out.join("index").join("tfidf"))?;
            &tfidf
        }
        EmbedderKind::Encoder => {
            let ckpt = checkpoint_for_encoder
                .ok_or_else(|| Error::Config("the encoder embedder needs a checkpoint".into()))?;
            encoder = EncoderEmbedder {
                model: &ckpt.model,
                vocab: &ckpt.vocab,
            };
            &encoder
        }
    };
    let index = EmbeddingIndex::build(&docs, emb)?;
    index.save(&out.join("index"))?;
    let indexed: std::collections::HashSet<&str> = index.ids().iter().map(String::as_str).collect();
    let refs: Vec<(String, String)> = pairs
        .iter()
        .filter(|p| indexed.contains(p.song_id.as_str()))
        .map(|p| (p.song_id.clone(), p.interpretation.clone()))
        .collect();
    let queries = make_queries(&refs, seed);
    data::write_jsonl(&out.join("queries.jsonl"), &queries.queries)?;
    let report = evaluate_retrieval(&queries, &index, emb)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
