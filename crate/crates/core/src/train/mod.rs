//! Teacher-forced training with AdaFactor, a two-level learning-rate schedule
//! and early stopping on validation ROUGE-1.

mod adafactor;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adafactor::{adafactor_update, decay_rate, AdaFactor, Moments, CLIP_THRESHOLD, EPS1};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{DecodeMode, Example, FusionModel, Seq2SeqBatch};
use crate::tensor::{ParamStore, Tape};
use crate::text::Vocabulary;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// File name of the per-epoch history inside a run directory.
pub const HISTORY_FILE: &str = "history.jsonl";
/// Subdirectory holding the best checkpoint.
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// First (1-based) epoch trained at `lr_reduced`.
    pub reduce_at_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Token budget of greedy validation decoding.
    pub valid_max_new: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 6e-4,
            lr_reduced: 6e-5,
            reduce_at_epoch: 11,
            max_epochs: 20,
            patience: 3,
            batch_size: 8,
            seed: 0,
            valid_max_new: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // a reduction point past max_epochs is allowed: the run never reduces
        if self.reduce_at_epoch == 0 || self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.valid_max_new == 0 {
            return Err(Error::Config("reduce_at_epoch, patience, batch_size, max_epochs and valid_max_new must be positive".into()));
        }
        for lr in [self.lr_initial, self.lr_reduced] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Learning rate of a 1-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.reduce_at_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_reduced
    }
}

/// Patience-based stopping on a score where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records the score of `epoch`. Only strict improvements reset the count
    /// of stale epochs; `stop` is raised once it reaches the patience.
    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        let improved = self.best.map_or(true, |(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Verdict {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// False when a non-finite gradient caused the update to be skipped.
    pub applied: bool,
}

/// Forward, backward and one AdaFactor update on a batch. Batch-norm running
/// statistics are folded in only when the update is applied.
pub fn training_step(
    model: &mut FusionModel<f32>,
    opt: &mut AdaFactor,
    examples: &[&Example],
    lr: f64,
) -> Result<StepOutcome> {
    if examples.is_empty() {
        return Err(Error::pre("training_step", "empty batch"));
    }
    let batch = Seq2SeqBatch::from_examples(examples)?;
    let (loss, grads, bn_updates) = {
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let out = model.loss_with(&tape, &bound, &batch, true)?;
        let loss = out.loss.value().item() as f64;
        let grads = bound.gradients(&tape.backward(&out.loss)?);
        (loss, grads, out.bn_updates)
    };
    match opt.step(model.params_mut(), &grads, lr) {
        Ok(()) => {
            model.apply_bn_updates(&bn_updates, BN_MOMENTUM)?;
            Ok(StepOutcome { loss, applied: true })
        }
        Err(Error::NonFinite(what)) => {
            warn!("skipping update: non-finite {what} (loss {loss})");
            Ok(StepOutcome { loss, applied: false })
        }
        Err(e) => Err(e),
    }
}

/// Scores a model after each epoch; larger is better.
pub trait Validator {
    fn score(&mut self, model: &FusionModel<f32>, epoch: usize) -> Result<f64>;
}

/// Mean ROUGE-1 F of greedy generations against the example targets.
pub struct Rouge1Validator<'a> {
    pub vocab: &'a Vocabulary,
    pub examples: &'a [Example],
    pub max_new: usize,
}

impl Validator for Rouge1Validator<'_> {
    fn score(&mut self, model: &FusionModel<f32>, _epoch: usize) -> Result<f64> {
        if self.examples.is_empty() {
            return Err(Error::pre("validation", "empty validation set"));
        }
        let mut total = 0.0;
        for ex in self.examples {
            let ids = model.generate_ids(&ex.source, ex.audio.as_deref(), DecodeMode::Greedy, self.max_new)?;
            let hyp = self.vocab.decode(&ids)?;
            let reference = self.vocab.decode(&ex.target.ids)?;
            total += metrics::rouge_n(&hyp, &reference, 1).f;
        }
        Ok(total / self.examples.len() as f64)
    }
}

impl<F> Validator for F
where
    F: FnMut(&FusionModel<f32>, usize) -> Result<f64>,
{
    fn score(&mut self, model: &FusionModel<f32>, epoch: usize) -> Result<f64> {
        self(model, epoch)
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub valid_rouge1: f64,
    pub lr: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

/// Training aborted; `history` holds the epochs completed before `error`.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} epoch(s): {error}", history.len())]
pub struct FitFailure {
    pub history: Vec<EpochRecord>,
    #[source]
    pub error: Error,
}

/// Where [`fit`] writes its artifacts: `history.jsonl` and `best/`.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn history(&self) -> PathBuf {
        self.0.join(HISTORY_FILE)
    }

    pub fn best(&self) -> PathBuf {
        self.0.join(BEST_DIR)
    }
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains `model` in place. After every epoch the validator scores the model;
/// training stops after `patience` epochs without a strict improvement or at
/// `max_epochs`, and the model is left holding the parameters of the best
/// epoch. With `run_dir` the history is appended as JSON lines and the best
/// checkpoint is saved under `best/`.
pub fn fit<V: Validator>(
    model: &mut FusionModel<f32>,
    train: &[Example],
    cfg: &TrainConfig,
    validator: &mut V,
    run_dir: Option<&RunDir>,
) -> std::result::Result<FitOutcome, FitFailure> {
    let mut history = Vec::new();
    match fit_inner(model, train, cfg, validator, run_dir, &mut history) {
        Ok((best_epoch, best_score, stopped_early)) => Ok(FitOutcome {
            history,
            best_epoch,
            best_score,
            stopped_early,
        }),
        Err(error) => Err(FitFailure { history, error }),
    }
}

fn fit_inner<V: Validator>(
    model: &mut FusionModel<f32>,
    train: &[Example],
    cfg: &TrainConfig,
    validator: &mut V,
    run_dir: Option<&RunDir>,
    history: &mut Vec<EpochRecord>,
) -> Result<(usize, f64, bool)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::pre("fit", "empty training set"));
    }
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(&dir.0)?;
            Some(BufWriter::new(File::create(dir.history())?))
        }
        None => None,
    };
    let mut opt = AdaFactor::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params: Option<ParamStore<f32>> = None;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut loss_sum = 0.0;
        let mut skipped = 0;
        let plan = batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &plan {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let step = training_step(model, &mut opt, &batch, lr)?;
            loss_sum += step.loss;
            skipped += usize::from(!step.applied);
        }
        let score = validator.score(model, epoch)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / plan.len() as f64,
            valid_rouge1: score,
            lr,
            skipped_steps: skipped,
        };
        info!(
            "epoch {epoch}: loss {:.4} valid R-1 {:.4} lr {lr:e}",
            record.loss, record.valid_rouge1
        );
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        history.push(record);
        let verdict = stopper.observe(epoch, score);
        if verdict.improved {
            best_params = Some(model.params().clone());
            if let Some(dir) = run_dir {
                model.save(&dir.best())?;
            }
        }
        if verdict.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    Ok((
        stopper.best_epoch().expect("at least one epoch"),
        stopper.best_score().expect("at least one epoch"),
        stopped_early,
    ))
}

/// Reads a history file written by [`fit`].
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_at_epoch_eleven() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(1, &cfg), 6e-4);
        assert_eq!(lr_schedule(10, &cfg), 6e-4);
        assert_eq!(lr_schedule(11, &cfg), 6e-5);
        assert_eq!(lr_schedule(20, &cfg), 6e-5);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let short = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        assert!(short.validate().is_ok());
        let bad = TrainConfig {
            reduce_at_epoch: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn run(scores: &[f64], patience: usize) -> (usize, Option<usize>) {
        let mut s = EarlyStopping::new(patience);
        for (i, &x) in scores.iter().enumerate() {
            if s.observe(i + 1, x).stop {
                return (i + 1, s.best_epoch());
            }
        }
        (scores.len(), s.best_epoch())
    }

    #[test]
    fn stopping_rule() {
        assert_eq!(run(&[0.2, 0.3, 0.29, 0.28, 0.27], 3), (5, Some(2)));
        // ties are not improvements
        assert_eq!(run(&[0.2, 0.2, 0.2, 0.2], 3), (4, Some(1)));
        let rising: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(run(&rising, 3), (20, Some(20)));
        assert_eq!(run(&[0.5, 0.4, 0.6, 0.1, 0.1, 0.1, 0.9], 3), (6, Some(3)));
    }

    #[test]
    fn batches_cover_every_example_once() {
        let plan = batches(19, 8, 3, 1);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 3]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..19).collect::<Vec<_>>());
        assert_eq!(batches(19, 8, 3, 1), plan);
        assert_ne!(batches(19, 8, 3, 2), plan);
    }
}
