//! Raw audio to the 128-band log-mel spectrogram consumed by the audio encoder.
//!
//! Pipeline: mono PCM → windowed-sinc resampling to 16 kHz → 512-point STFT
//! (periodic Hann, hop 256, no centre padding) → 128 HTK-mel filters spanning
//! 0–8 kHz → `ln(x + 1e-10)`.

mod mel;
mod resample;
mod stft;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use resample::resample;
pub use stft::{frame_count, hann_window, stft_power};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 512;
pub const HOP: usize = 256;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
pub const N_MELS: usize = 128;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8_000.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono samples at a known rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::pre("audio clip", "sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Natural-log mel power, `[128, frames]`, at 16 kHz with a 256-sample hop.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor<f32>,
}

impl MelSpectrogram {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != N_MELS {
            return Err(Error::shape("mel spectrogram", values.shape(), &[N_MELS, 0]));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("mel spectrogram"));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<f32> {
        self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// The value a frame of digital silence maps to.
    pub fn floor_value() -> f32 {
        LOG_FLOOR.ln() as f32
    }

    /// Pads (with the silence value) or truncates to `frames`.
    pub fn fit_frames(&self, frames: usize) -> MelSpectrogram {
        let cur = self.n_frames();
        let src = self.values.data();
        let floor = Self::floor_value();
        let data: Vec<f32> = (0..N_MELS)
            .flat_map(|m| (0..frames).map(move |t| if t < cur { src[m * cur + t] } else { floor }))
            .collect();
        MelSpectrogram {
            values: Tensor::new(&[N_MELS, frames], data).expect("fit_frames shape"),
        }
    }
}

/// Log-mel spectrogram of a 16 kHz clip.
pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    log_mel_with(clip, &mel_filterbank(N_MELS, F_MIN, F_MAX, N_BINS, SAMPLE_RATE)?)
}

/// Same as [`log_mel`] with a precomputed filterbank.
pub fn log_mel_with(clip: &AudioClip, bank: &MelFilterbank) -> Result<MelSpectrogram> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::pre(
            "log_mel",
            format!("expected {SAMPLE_RATE} Hz input, got {} Hz (resample first)", clip.sample_rate),
        ));
    }
    let power = stft::power_frames(&clip.samples)?;
    let frames = power.len() / N_BINS;
    let w = bank.weights();
    let mut out = vec![0f32; N_MELS * frames];
    for t in 0..frames {
        let frame = &power[t * N_BINS..(t + 1) * N_BINS];
        for m in 0..N_MELS {
            let row = &w[m * N_BINS..(m + 1) * N_BINS];
            let e: f64 = row.iter().zip(frame).map(|(a, b)| a * b).sum();
            out[m * frames + t] = (e + LOG_FLOOR).ln() as f32;
        }
    }
    MelSpectrogram::new(Tensor::new(&[N_MELS, frames], out)?)
}

/// Resamples to 16 kHz when needed, then computes the log-mel spectrogram.
pub fn featurize(clip: &AudioClip) -> Result<MelSpectrogram> {
    if clip.sample_rate == SAMPLE_RATE {
        log_mel(clip)
    } else {
        log_mel(&resample(clip, SAMPLE_RATE)?)
    }
}

/// A pure tone, handy for tests and synthetic corpora.
pub fn sine(freq_hz: f64, seconds: f64, sample_rate: u32, amplitude: f64) -> AudioClip {
    let n = (seconds * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| (amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate as f64).sin()) as f32)
        .collect();
    AudioClip {
        samples,
        sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_seconds_gives_1874_frames() {
        let clip = AudioClip::new(vec![0.0; 480_000], SAMPLE_RATE).unwrap();
        let mel = log_mel(&clip).unwrap();
        assert_eq!(mel.values().shape(), &[128, 1874]);
        // digital silence sits exactly on the floor
        let floor = (1e-10f64).ln() as f32;
        assert!(mel.values().data().iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_rate_rejected() {
        let clip = AudioClip::new(vec![0.0; 1024], 8_000).unwrap();
        assert!(log_mel(&clip).is_err());
        assert!(featurize(&clip).is_err(), "upsampling is unsupported");
    }

    #[test]
    fn tone_lands_in_nearest_band() {
        let bank = mel_filterbank(N_MELS, F_MIN, F_MAX, N_BINS, SAMPLE_RATE).unwrap();
        let nearest = bank
            .center_frequencies()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        assert_eq!(nearest, 24);
        let mel = log_mel_with(&sine(440.0, 1.0, SAMPLE_RATE, 0.5), &bank).unwrap();
        let v = mel.values();
        for t in 0..mel.n_frames() {
            let argmax = (0..N_MELS)
                .max_by(|&a, &b| v.at(&[a, t]).total_cmp(&v.at(&[b, t])))
                .unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn pipeline_is_bit_deterministic() {
        let clip = sine(1234.5, 0.5, 44_100, 0.3);
        let a = featurize(&clip).unwrap();
        let b = featurize(&clip).unwrap();
        assert!(a.values().bit_eq(b.values()));
    }

    #[test]
    fn fit_frames_pads_with_silence() {
        let mel = log_mel(&sine(300.0, 0.1, SAMPLE_RATE, 0.5)).unwrap();
        let n = mel.n_frames();
        let padded = mel.fit_frames(n + 2);
        assert_eq!(padded.values().at(&[5, n + 1]), MelSpectrogram::floor_value());
        assert_eq!(padded.values().at(&[5, 0]), mel.values().at(&[5, 0]));
        assert_eq!(mel.fit_frames(1).n_frames(), 1);
    }
}
