//! Rational-ratio downsampling with a Kaiser-windowed sinc kernel.
//!
//! For `source → target`, output sample `n` sits at input time
//! `n · source / target`. With the ratio reduced to `p / q`, that time has one
//! of `q` fractional phases, so the kernel is tabulated once per phase. The
//! low-pass cutoff is the target Nyquist frequency.

use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

/// Zero crossings of the sinc on each side, measured at the target rate.
const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

struct Kernel {
    /// Taps at input offsets `-(half - 1) ..= half` relative to `floor(t)`.
    half: i64,
    phases: Vec<Vec<f64>>,
}

impl Kernel {
    fn new(up: u64, down: u64) -> Self {
        // cutoff relative to the input Nyquist
        let cutoff = up as f64 / down as f64;
        let support = ZERO_CROSSINGS / cutoff;
        let half = support.ceil() as i64 + 1;
        let i0_beta = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                (-(half - 1)..=half)
                    .map(|j| {
                        let t = j as f64 - frac;
                        if t.abs() >= support {
                            0.0
                        } else {
                            let r = t / support;
                            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                            cutoff * sinc(cutoff * t) * window
                        }
                    })
                    .collect()
            })
            .collect();
        Kernel { half, phases }
    }
}

/// Downsamples to `target_rate`; output length is `floor(n · target / source)`.
///
/// Each output sample is normalised by the sum of the kernel taps that fall
/// inside the signal, so constant input stays constant up to the edges.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let (src, tgt) = (clip.sample_rate as u64, target_rate as u64);
    if tgt == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if tgt > src {
        return Err(Error::Unsupported(format!("upsampling {src} Hz to {tgt} Hz")));
    }
    if tgt == src {
        return Ok(clip.clone());
    }
    let g = gcd(src, tgt);
    let (down, up) = (src / g, tgt / g);
    let kernel = Kernel::new(up, down);
    let n_in = clip.samples.len() as u64;
    let n_out = n_in * tgt / src;
    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        let pos = n * down;
        let base = (pos / up) as i64;
        let taps = &kernel.phases[(pos % up) as usize];
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (j, &w) in (-(kernel.half - 1)..=kernel.half).zip(taps) {
            let i = base + j;
            if i >= 0 && (i as u64) < n_in {
                acc += w * x[i as usize] as f64;
                norm += w;
            }
        }
        out.push((acc / norm) as f32);
    }
    AudioClip::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    #[test]
    fn output_length() {
        let clip = AudioClip::new(vec![0.0; 44_100], 44_100).unwrap();
        assert_eq!(resample(&clip, 16_000).unwrap().samples.len(), 16_000);
        let odd = AudioClip::new(vec![0.0; 1001], 44_100).unwrap();
        assert_eq!(resample(&odd, 16_000).unwrap().samples.len(), 1001 * 16_000 / 44_100);
    }

    #[test]
    fn dc_preserved() {
        let clip = AudioClip::new(vec![0.37; 4410], 44_100).unwrap();
        let out = resample(&clip, 16_000).unwrap();
        assert!(out.samples.iter().all(|&v| (v - 0.37).abs() <= 1e-6));
    }

    #[test]
    fn upsampling_unsupported() {
        let clip = AudioClip::new(vec![0.0; 100], 8_000).unwrap();
        assert!(matches!(resample(&clip, 16_000), Err(Error::Unsupported(_))));
    }

    fn dominant_hz(samples: &[f32], rate: u32) -> f64 {
        let n = samples.len();
        let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        peak as f64 * rate as f64 / n as f64
    }

    #[test]
    fn tone_frequency_survives() {
        let clip = sine(440.0, 1.0, 44_100, 0.9);
        let out = resample(&clip, 16_000).unwrap();
        assert_eq!(out.samples.len(), 16_000);
        assert_eq!(dominant_hz(&out.samples, 16_000), 440.0);
    }

    #[test]
    fn content_above_target_nyquist_is_suppressed() {
        // 12 kHz would alias to 4 kHz without filtering
        let clip = sine(12_000.0, 0.5, 44_100, 1.0);
        let out = resample(&clip, 16_000).unwrap();
        let mid = &out.samples[1000..7000];
        let rms = (mid.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / mid.len() as f64).sqrt();
        assert!(rms < 1e-3, "alias rms {rms}");
    }
}
