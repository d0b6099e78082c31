//! Audio enters the encoder through cross-modal attention in the last layers
//! only, and a zero output projection leaves the text model untouched.
use lyricfusion::audio::{featurize, sine, SAMPLE_RATE};
use lyricfusion::model::{AudioBatch, FusionModel, ModelConfig};
use lyricfusion::tensor::Tensor;
use lyricfusion::text::{TokenBatch, Vocabulary};

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::build(["a low drone under the rain"], 280)?;
    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.n_enc = 4;
    cfg.fusion.fuse_last_k = 2;
    let mut model = FusionModel::new(cfg, 3)?;

    let src = TokenBatch::encode(&vocab, &["rain all night"], 32)?;
    let tgt = TokenBatch::encode(&vocab, &["a drone"], 32)?.without_last()?;
    let low = featurize(&sine(220.0, 1.0, SAMPLE_RATE, 0.5))?;
    let high = featurize(&sine(3500.0, 1.0, SAMPLE_RATE, 0.5))?;
    let (low, high) = (AudioBatch::from_mels(&[&low])?, AudioBatch::from_mels(&[&high])?);

    let same = model.encoder_states(&src, Some(&low))?.bit_eq(&model.encoder_states(&src, None)?);
    println!("at initialisation (W'_a = 0) audio changes nothing: {same}");

    for id in model.fusion_output_projections() {
        let shape = model.params().get(id).shape().to_vec();
        let mut k = 0u32;
        model.params_mut().set(
            id,
            Tensor::from_fn(&shape, |_| {
                k = k.wrapping_mul(1_103_515_245).wrapping_add(12_345);
                (k >> 16) as f32 / 65_536.0 * 0.2 - 0.1
            }),
        )?;
    }
    let (_, a) = model.forward_traced(&src, Some(&low), &tgt)?;
    let (_, b) = model.forward_traced(&src, Some(&high), &tgt)?;
    for (i, (x, y)) in a.encoder_outputs.iter().zip(&b.encoder_outputs).enumerate() {
        println!("encoder layer {i}: max |low - high| = {:.3e}", x.max_abs_diff(y));
    }
    Ok(())
}
