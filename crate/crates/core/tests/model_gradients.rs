//! End-to-end loss gradients of the fused model against central differences.

use std::rc::Rc;

use lyricfusion::audio::{MelSpectrogram, N_MELS};
use lyricfusion::model::{Example, FusionModel, ModelConfig, Seq2SeqBatch};
use lyricfusion::tensor::{check_gradients, GradCheckOptions, ParamId, Tensor};
use lyricfusion::text::{EncodedRow, BOS, EOS, MIN_VOCAB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(rng: &mut ChaCha8Rng, len: usize) -> EncodedRow {
    let mut ids = vec![BOS];
    ids.extend((0..len).map(|_| rng.gen_range(4..MIN_VOCAB as u32)));
    ids.push(EOS);
    EncodedRow {
        mask: vec![true; ids.len()],
        ids,
    }
}

fn example(rng: &mut ChaCha8Rng, frames: usize) -> Example {
    let (ls, lt) = (rng.gen_range(1..6), rng.gen_range(1..5));
    Example {
        source: row(rng, ls),
        target: row(rng, lt),
        audio: Some(Rc::new(
            MelSpectrogram::new(Tensor::from_fn(&[N_MELS, frames], |_| rng.gen_range(-3.0f32..1.0))).unwrap(),
        )),
    }
}

const SCALE: f64 = 0.2;

fn fused_loss_check(seed: u64, train_bn: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FusionModel::new(ModelConfig::toy(MIN_VOCAB), seed).unwrap().cast::<f64>();
    // move away from the zero fusion projection so every parameter has a generic gradient
    let ids: Vec<ParamId> = model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-SCALE..SCALE);
        }
    }
    let a = example(&mut rng, 16);
    let b = example(&mut rng, 12);
    let batch = Seq2SeqBatch::from_examples(&[&a, &b]).unwrap();
    let opts = GradCheckOptions {
        max_probes_per_param: Some(2),
        seed,
        ..GradCheckOptions::default()
    };
    let report = check_gradients(
        model.params(),
        |tape, bound| Ok(model.loss_with(tape, bound, &batch, train_bn)?.loss),
        &opts,
    )
    .unwrap();
    assert!(report.probes > 200);
    assert!(
        report.max_rel_error < 1e-3,
        "seed {seed}: {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

#[test]
fn fused_loss_gradients_with_batch_statistics() {
    for seed in 0..20 {
        fused_loss_check(seed, true);
    }
}

#[test]
fn fused_loss_gradients_with_running_statistics() {
    for seed in 100..105 {
        fused_loss_check(seed, false);
    }
}
