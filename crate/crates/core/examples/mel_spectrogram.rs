//! Log-mel features of a WAV file, or of a synthetic chord when no path is given.
//!
//!     cargo run --example mel_spectrogram -- song.wav
use lyricfusion::audio::{featurize, frame_count, read_wav, AudioClip, MelSpectrogram, SAMPLE_RATE};

fn loudest_band(mel: &MelSpectrogram) -> usize {
    let v = mel.values();
    let frames = v.shape()[1];
    let energy: Vec<f32> = (0..v.shape()[0]).map(|b| v.row(b).iter().sum::<f32>() / frames as f32).collect();
    (0..energy.len()).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap_or(0)
}

fn main() -> anyhow::Result<()> {
    let clip = match std::env::args().nth(1) {
        Some(path) => read_wav(path.as_ref())?,
        None => {
            let n = 2 * SAMPLE_RATE as usize;
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    (0.4 * (std::f64::consts::TAU * 440.0 * t).sin() + 0.2 * (std::f64::consts::TAU * 1320.0 * t).sin()) as f32
                })
                .collect();
            AudioClip::new(samples, SAMPLE_RATE)?
        }
    };
    // featurize resamples to 16 kHz first
    let mel = featurize(&clip)?;
    println!(
        "{:.2} s at {} Hz -> mel {:?} (expected frames {:?})",
        clip.duration_secs(),
        clip.sample_rate,
        mel.values().shape(),
        frame_count((clip.duration_secs() * SAMPLE_RATE as f64).round() as usize)
    );
    println!("loudest mel band: {}", loudest_band(&mel));
    Ok(())
}
