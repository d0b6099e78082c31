//! The text-only encoder-decoder: a forward pass, its loss, and one training step.
use lyricfusion::model::{DecodeMode, Example, FusionModel, ModelConfig, Seq2SeqBatch};
use lyricfusion::text::Vocabulary;
use lyricfusion::train::{training_step, AdaFactor};

fn main() -> anyhow::Result<()> {
    let pairs = [
        ("rain on the window", "a song about rain"),
        ("the long train home", "a song about trains"),
    ];
    let vocab = Vocabulary::build(pairs.iter().flat_map(|(a, b)| [*a, *b]), 300)?;
    let cfg = ModelConfig::toy(vocab.len()).text_only();
    let mut model = FusionModel::new(cfg, 7)?;
    println!("{} trainable values", model.params().num_trainable_values());

    let examples: Vec<Example> = pairs
        .iter()
        .map(|(src, tgt)| Example::encode(&vocab, model.config(), src, tgt, None))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Seq2SeqBatch::from_examples(&refs)?;
    println!("initial loss {:.4} (ln V = {:.4})", model.loss(&batch)?, (vocab.len() as f64).ln());

    let mut opt = AdaFactor::new();
    for step in 1..=200 {
        let out = training_step(&mut model, &mut opt, &refs, 6e-4)?;
        if step % 50 == 0 {
            println!("step {step}: loss {:.4}", out.loss);
        }
    }
    for (src, tgt) in pairs {
        let got = model.generate(&vocab, src, None, DecodeMode::Greedy, 16)?;
        println!("{src:?} -> {got:?} (target {tgt:?})");
    }
    Ok(())
}
