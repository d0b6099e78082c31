use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use lyricfusion::audio::{featurize, read_wav};
use lyricfusion::data::{read_pairs, VoteMode};
use lyricfusion::model::DecodeMode;
use lyricfusion::pipeline::{self, Checkpoint, Database, EmbedderKind, TrainOptions};
use lyricfusion::train::TrainConfig;

#[derive(Parser)]
#[command(name = "lyricfusion", version, about = "Audio-informed lyric interpretation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model size profile: toy or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Dataset subset: full, nonneg, positive or random:<n>.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint or training-run directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Retrieval embedder: tfidf or encoder.
    #[arg(long, global = true)]
    embedder: Option<String>,
    /// Beam width; greedy decoding when absent or 1.
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// Maximum number of generated tokens.
    #[arg(long, global = true)]
    max_new: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a dataset and write train/valid/test pair files.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
        /// Song ids reserved for testing, one per line.
        #[arg(long)]
        test_ids: Option<PathBuf>,
        #[arg(long)]
        valid_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cache log-mel spectrograms of every song in a dataset.
    Featurize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Train a model with early stopping on validation ROUGE-1.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train the audio-free baseline.
        #[arg(long)]
        text_only: bool,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Generate an interpretation for one song or for a pair file.
    Generate {
        #[arg(long, conflicts_with = "pairs")]
        lyrics: Option<String>,
        /// WAV file of the song (any sample rate).
        #[arg(long, requires = "lyrics")]
        audio: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Output file for pair-file generation (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generations: R-1, R-2, R-L and METEOR.
    Evaluate {
        /// Generation records written by `generate --pairs`.
        #[arg(long, conflicts_with_all = ["candidates", "references"])]
        generations: Option<PathBuf>,
        /// Candidate texts, one per line.
        #[arg(long, requires = "references")]
        candidates: Option<PathBuf>,
        /// Reference texts, one per line.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Per-pair scores as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a retrieval index and report MRR over sentence queries.
    Retrieve {
        /// Pair file whose songs form the database and supply the queries.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Previously generated texts to index instead of generating.
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics of a dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
}

/// Optional defaults read from `--config`.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    profile: Option<String>,
    mode: Option<String>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    embedder: Option<String>,
    beam: Option<usize>,
    max_new: Option<usize>,
    valid_fraction: Option<f64>,
    vocab_size: Option<usize>,
    train: Option<TrainConfig>,
}

struct Settings {
    cfg: RunConfig,
    common: Common,
}

impl Settings {
    fn seed(&self) -> u64 {
        self.common.seed.or(self.cfg.seed).unwrap_or(0)
    }

    fn profile(&self) -> String {
        self.common.profile.clone().or(self.cfg.profile.clone()).unwrap_or_else(|| "toy".into())
    }

    fn mode(&self) -> Result<VoteMode> {
        let m = self.common.mode.clone().or(self.cfg.mode.clone()).unwrap_or_else(|| "full".into());
        Ok(m.parse::<VoteMode>()?.with_seed(self.seed()))
    }

    fn decode_mode(&self) -> DecodeMode {
        match self.common.beam.or(self.cfg.beam) {
            Some(k) if k > 1 => DecodeMode::Beam(k),
            _ => DecodeMode::Greedy,
        }
    }

    fn max_new(&self) -> usize {
        self.common.max_new.or(self.cfg.max_new).unwrap_or(128)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let dir = self
            .common
            .checkpoint
            .clone()
            .or(self.cfg.checkpoint.clone())
            .context("--checkpoint is required")?;
        Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("missing input: {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let s = Settings {
        cfg: load_config(cli.common.config.as_deref())?,
        common: cli.common,
    };
    match cli.command {
        Command::Preprocess {
            dataset,
            test_ids,
            valid_fraction,
            out,
        } => {
            let frac = valid_fraction.or(s.cfg.valid_fraction).unwrap_or(0.1);
            let summary = pipeline::preprocess(&dataset, test_ids.as_deref(), s.mode()?, frac, s.seed(), &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Featurize { dataset, out, workers } => {
            let n = pipeline::featurize(&dataset, &out, workers)?;
            println!("featurized {n} songs into {}", out.display());
        }
        Command::Train {
            train,
            valid,
            features,
            out,
            text_only,
            vocab_size,
            epochs,
            batch_size,
        } => {
            let mut tc = s.cfg.train.clone().unwrap_or_default();
            tc.seed = s.seed();
            if let Some(e) = epochs {
                tc.max_epochs = e;
            }
            if let Some(b) = batch_size {
                tc.batch_size = b;
            }
            if let Some(m) = s.common.max_new.or(s.cfg.max_new) {
                tc.valid_max_new = m;
            }
            let opts = TrainOptions {
                profile: s.profile(),
                text_only,
                vocab_cap: vocab_size.or(s.cfg.vocab_size).unwrap_or(lyricfusion::text::DEFAULT_VOCAB_CAP),
                train: tc,
                init: s.common.checkpoint.clone().or(s.cfg.checkpoint.clone()),
            };
            let outcome = pipeline::train(&train, &valid, features.as_deref(), &out, &opts)?;
            println!(
                "best epoch {} (validation ROUGE-1 {:.4}) of {}; checkpoint in {}",
                outcome.best_epoch,
                outcome.best_score,
                outcome.history.len(),
                out.join(lyricfusion::train::BEST_DIR).display()
            );
        }
        Command::Generate {
            lyrics,
            audio,
            pairs,
            features,
            out,
        } => {
            let ckpt = s.checkpoint()?;
            match (lyrics, pairs) {
                (Some(lyrics), _) => {
                    let mel = audio
                        .map(|p| -> Result<_> { Ok(featurize(&read_wav(&p)?)?) })
                        .transpose()?;
                    println!("{}", ckpt.generate(&lyrics, mel.as_ref(), s.decode_mode(), s.max_new())?);
                }
                (None, Some(pairs)) => {
                    let cache = features.as_deref().map(pipeline::load_features).transpose()?;
                    let gens =
                        pipeline::generate_pairs(&ckpt, &read_pairs(&pairs)?, cache.as_ref(), s.decode_mode(), s.max_new())?;
                    match out {
                        Some(path) => pipeline::write_generations(&path, &gens)?,
                        None => {
                            for g in &gens {
                                println!("{}", serde_json::to_string(g)?);
                            }
                        }
                    }
                }
                (None, None) => bail!("pass --lyrics or --pairs"),
            }
        }
        Command::Evaluate {
            generations,
            candidates,
            references,
            out,
        } => {
            let (cands, refs) = match (generations, candidates, references) {
                (Some(g), _, _) => {
                    let gens = pipeline::read_generations(&g)?;
                    (
                        gens.iter().map(|g| g.generated.clone()).collect(),
                        gens.iter().map(|g| g.reference.clone()).collect(),
                    )
                }
                (None, Some(c), Some(r)) => (pipeline::read_lines(&c)?, pipeline::read_lines(&r)?),
                _ => bail!("pass --generations, or --candidates with --references"),
            };
            let report = pipeline::evaluate(&cands, &refs)?;
            if let Some(path) = out {
                let mut lines = String::new();
                for p in &report.pairs {
                    lines.push_str(&serde_json::to_string(p)?);
                    lines.push('\n');
                }
                std::fs::write(&path, lines)?;
            }
            print!("{}", report.table());
        }
        Command::Retrieve {
            pairs,
            features,
            generations,
            out,
        } => {
            let pairs = read_pairs(&pairs)?;
            let kind: EmbedderKind = s
                .common
                .embedder
                .clone()
                .or(s.cfg.embedder.clone())
                .unwrap_or_else(|| "tfidf".into())
                .parse()?;
            let needs_ckpt = generations.is_none() || kind == EmbedderKind::Encoder;
            let ckpt = if needs_ckpt { Some(s.checkpoint()?) } else { None };
            let cache = features.as_deref().map(pipeline::load_features).transpose()?;
            let gens = generations.as_deref().map(pipeline::read_generations).transpose()?;
            let db = match (&gens, &ckpt) {
                (Some(g), _) => Database::Texts(g),
                (None, Some(c)) => Database::Generate {
                    ckpt: c,
                    features: cache.as_ref(),
                    max_new: s.max_new(),
                },
                (None, None) => unreachable!("checkpoint loaded when no generations are given"),
            };
            let report = pipeline::retrieve(&pairs, db, kind, ckpt.as_ref(), s.seed(), &out)?;
            println!(
                "MRR {:.4} over {} queries, database of {} songs ({})",
                report.mrr,
                report.ranks.len(),
                report.database_size,
                report.embedder
            );
        }
        Command::Stats { dataset } => {
            println!("{}", serde_json::to_string_pretty(&pipeline::stats(&dataset)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
