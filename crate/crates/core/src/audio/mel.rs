use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as a dense `[n_mels, n_bins]` matrix.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Peak frequency of each filter in Hz.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.n_mels, self.n_bins], self.weights.clone()).expect("filterbank shape")
    }
}

/// Integral of the unit-height triangle `(left, center, right)` from -inf to `x`.
fn triangle_cdf(x: f64, left: f64, center: f64, right: f64) -> f64 {
    if x <= left {
        0.0
    } else if x <= center {
        (x - left).powi(2) / (2.0 * (center - left))
    } else if x <= right {
        (center - left) / 2.0 + (right - center) / 2.0 - (right - x).powi(2) / (2.0 * (right - center))
    } else {
        (right - left) / 2.0
    }
}

/// Filters with peaks equally spaced on the HTK mel scale between `f_min` and `f_max`.
///
/// Each weight is the triangle's mean height over the FFT bin's bandwidth
/// (`[f_k - Δ/2, f_k + Δ/2]`, `Δ = sr / n_fft`). Narrow low-frequency triangles
/// that fall between bin centres therefore still receive energy.
pub fn mel_filterbank(n_mels: usize, f_min: f64, f_max: f64, n_bins: usize, sample_rate: u32) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if f_max > nyquist || f_min < 0.0 || f_min >= f_max {
        return Err(Error::Config(format!(
            "mel range {f_min}..{f_max} Hz must lie inside 0..{nyquist} Hz"
        )));
    }
    if n_mels == 0 || n_bins < 2 {
        return Err(Error::Config("mel filterbank needs at least one filter and two bins".into()));
    }
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_width = nyquist / (n_bins - 1) as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_width;
            let a = f - bin_width / 2.0;
            let b = f + bin_width / 2.0;
            weights[m * n_bins + k] = (triangle_cdf(b, l, c, r) - triangle_cdf(a, l, c, r)) / bin_width;
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        centers: points[1..=n_mels].to_vec(),
    })
}
