//! The whole harness on a synthetic corpus: preprocess, featurize, train,
//! generate, evaluate and retrieve. Artifacts go to the directory given as the
//! first argument (a temporary one otherwise).
use std::path::PathBuf;

use lyricfusion::data::synthetic::{write_corpus, SyntheticOptions};
use lyricfusion::data::{read_pairs, VoteMode};
use lyricfusion::model::DecodeMode;
use lyricfusion::pipeline::{self, Checkpoint, Database, EmbedderKind, TrainOptions};
use lyricfusion::train::TrainConfig;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let tmp;
    let root = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let corpus = root.join("corpus");
    write_corpus(&corpus, &SyntheticOptions { songs: 48, ..SyntheticOptions::default() })?;
    let dataset = corpus.join("dataset.jsonl");

    let data = root.join("data");
    let summary = pipeline::preprocess(&dataset, Some(&corpus.join("test_ids.txt")), VoteMode::NonNeg, 0.1, 0, &data)?;
    println!("preprocess: {} train, {} valid, {} test pairs", summary.train, summary.valid, summary.test);
    let features = root.join("features");
    pipeline::featurize(&dataset, &features, 2)?;

    let run = root.join("run");
    let opts = TrainOptions {
        vocab_cap: 400,
        train: TrainConfig { max_epochs: 10, batch_size: 4, valid_max_new: 48, ..TrainConfig::default() },
        ..TrainOptions::default()
    };
    let fit = pipeline::train(&data.join("train.jsonl"), &data.join("valid.jsonl"), Some(&features), &run, &opts)?;
    println!("best epoch {} with validation ROUGE-1 {:.3}", fit.best_epoch, fit.best_score);

    let ckpt = Checkpoint::load(&run)?;
    let cache = pipeline::load_features(&features)?;
    let test = read_pairs(&data.join("test.jsonl"))?;
    let gens = pipeline::generate_pairs(&ckpt, &test, Some(&cache), DecodeMode::Beam(3), 48)?;
    let cands: Vec<String> = gens.iter().map(|g| g.generated.clone()).collect();
    let refs: Vec<String> = gens.iter().map(|g| g.reference.clone()).collect();
    print!("{}", pipeline::evaluate(&cands, &refs)?.table());

    let report = pipeline::retrieve(&test, Database::Texts(&gens), EmbedderKind::TfIdf, None, 0, &root.join("retrieval"))?;
    println!("retrieval MRR {:.3} over {} songs", report.mrr, report.database_size);
    Ok(())
}
