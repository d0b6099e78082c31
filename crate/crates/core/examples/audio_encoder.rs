//! The convolutional front end with self-attention: output length for clips of
//! several durations under both profiles.
use lyricfusion::audio::{featurize, sine, SAMPLE_RATE};
use lyricfusion::model::{AudioBatch, FusionModel, ModelConfig};
use lyricfusion::text::MIN_VOCAB;

fn main() -> anyhow::Result<()> {
    for (name, audio) in [
        ("toy", ModelConfig::toy(MIN_VOCAB).audio),
        ("paper", ModelConfig::paper(MIN_VOCAB).audio),
    ] {
        let mut cfg = ModelConfig::toy(MIN_VOCAB);
        cfg.audio = audio;
        let model = FusionModel::new(cfg, 0)?;
        for secs in [1.0, 5.0, 30.0] {
            let mel = featurize(&sine(440.0, secs, SAMPLE_RATE, 0.5))?;
            let z = model.audio_representation(&AudioBatch::from_mels(&[&mel])?)?;
            println!("{name:>5} {secs:>4} s: mel {:?} -> Z_m {:?}", mel.values().shape(), &z.shape()[1..]);
        }
    }
    Ok(())
}
