use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, FFT_SIZE, HOP, N_BINS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Periodic Hann window: `0.5 * (1 - cos(2πk / n))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect()
}

/// Number of full frames; the first frame starts at sample 0.
pub fn frame_count(samples: usize) -> Option<usize> {
    (samples >= FFT_SIZE).then(|| 1 + (samples - FFT_SIZE) / HOP)
}

/// Frame-major power spectra, `frames * 257` values.
pub(crate) fn power_frames(samples: &[f32]) -> Result<Vec<f64>> {
    let frames = frame_count(samples.len()).ok_or_else(|| {
        Error::pre(
            "stft",
            format!("clip has {} samples, need at least {FFT_SIZE}", samples.len()),
        )
    })?;
    let window = hann_window(FFT_SIZE);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Vec::with_capacity(frames * N_BINS);
    for f in 0..frames {
        let start = f * HOP;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + k] as f64 * window[k], 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..N_BINS].iter().map(|c| c.norm_sqr()));
    }
    Ok(out)
}

/// `|FFT|²` of each Hann-windowed frame, `[257, frames]`.
pub fn stft_power(clip: &AudioClip) -> Result<Tensor<f64>> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::pre("stft", format!("expected {SAMPLE_RATE} Hz, got {}", clip.sample_rate)));
    }
    let frames_major = power_frames(&clip.samples)?;
    let frames = frames_major.len() / N_BINS;
    let mut data = vec![0.0; frames_major.len()];
    for t in 0..frames {
        for b in 0..N_BINS {
            data[b * frames + t] = frames_major[t * N_BINS + b];
        }
    }
    Tensor::new(&[N_BINS, frames], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_endpoints() {
        let w = hann_window(512);
        assert_eq!(w[0], 0.0);
        assert!((w[256] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn thirty_second_frame_count() {
        assert_eq!(frame_count(480_000), Some(1874));
        assert_eq!(frame_count(511), None);
        assert_eq!(frame_count(512), Some(1));
    }

    #[test]
    fn short_clip_rejected() {
        let clip = AudioClip::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        assert!(stft_power(&clip).is_err());
    }

    #[test]
    fn thousand_hertz_peaks_at_bin_32() {
        let p = stft_power(&sine(1000.0, 0.5, SAMPLE_RATE, 0.8)).unwrap();
        let frames = p.shape()[1];
        for t in 0..frames {
            let argmax = (0..N_BINS).max_by(|&a, &b| p.at(&[a, t]).total_cmp(&p.at(&[b, t]))).unwrap();
            assert_eq!(argmax, 32);
        }
    }

    fn naive_frames(n: usize) -> usize {
        let mut count = 0;
        let mut start = 0;
        while start + FFT_SIZE <= n {
            count += 1;
            start += HOP;
        }
        count
    }

    proptest! {
        #[test]
        fn frame_formula_matches_slicer(n in 512usize..1_000_000) {
            prop_assert_eq!(frame_count(n), Some(naive_frames(n)));
        }
    }

    #[test]
    fn white_noise_energy_scales_with_length() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f32> = (0..64_000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let energy = |n: usize| power_frames(&noise[..n]).unwrap().iter().sum::<f64>();
            let short = energy(16_000);
            let long = energy(64_000);
            let ratio = (long / short) / 4.0;
            assert!((ratio - 1.0).abs() < 0.10, "seed {seed}: ratio {ratio}");
        }
    }
}
