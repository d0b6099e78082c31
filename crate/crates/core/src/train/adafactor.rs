//! AdaFactor without first moment and without relative step sizing: the caller
//! supplies the learning rate.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

/// Added to squared gradients before they enter the accumulators.
pub const EPS1: f64 = 1e-30;
/// Update RMS clipping threshold.
pub const CLIP_THRESHOLD: f64 = 1.0;
/// Exponent of the second-moment decay schedule `1 - t^-0.8`.
pub const DECAY_EXPONENT: f64 = 0.8;

/// Second-moment statistics of one parameter.
///
/// Tensors of rank two or more are viewed as `[shape[0], rest]` and keep one
/// accumulator per row and per column; vectors and scalars keep a full one.
#[derive(Clone, Debug, PartialEq)]
pub enum Moments {
    Factored { rows: Vec<f64>, cols: Vec<f64> },
    Full(Vec<f64>),
}

impl Moments {
    pub fn for_shape(shape: &[usize]) -> Moments {
        let n: usize = shape.iter().product();
        if shape.len() >= 2 {
            Moments::Factored {
                rows: vec![0.0; shape[0]],
                cols: vec![0.0; n / shape[0]],
            }
        } else {
            Moments::Full(vec![0.0; n])
        }
    }

    /// Current estimate `v̂` of the elementwise second moment.
    pub fn estimate(&self) -> Vec<f64> {
        match self {
            Moments::Full(v) => v.clone(),
            Moments::Factored { rows, cols } => {
                let mean_r = rows.iter().sum::<f64>() / rows.len() as f64;
                rows.iter()
                    .flat_map(|&r| cols.iter().map(move |&c| r * c / mean_r))
                    .collect()
            }
        }
    }

    fn accumulate(&mut self, g: &[f64], beta2: f64) {
        match self {
            Moments::Full(v) => {
                for (v, &g) in v.iter_mut().zip(g) {
                    *v = beta2 * *v + (1.0 - beta2) * (g * g + EPS1);
                }
            }
            Moments::Factored { rows, cols } => {
                let (n, m) = (rows.len(), cols.len());
                let mut row_mean = vec![0.0; n];
                let mut col_mean = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let sq = g[i * m + j] * g[i * m + j] + EPS1;
                        row_mean[i] += sq;
                        col_mean[j] += sq;
                    }
                }
                for (r, s) in rows.iter_mut().zip(&row_mean) {
                    *r = beta2 * *r + (1.0 - beta2) * s / m as f64;
                }
                for (c, s) in cols.iter_mut().zip(&col_mean) {
                    *c = beta2 * *c + (1.0 - beta2) * s / n as f64;
                }
            }
        }
    }

    fn matches(&self, shape: &[usize]) -> bool {
        match (self, Moments::for_shape(shape)) {
            (Moments::Full(a), Moments::Full(b)) => a.len() == b.len(),
            (Moments::Factored { rows, cols }, Moments::Factored { rows: r, cols: c }) => {
                rows.len() == r.len() && cols.len() == c.len()
            }
            _ => false,
        }
    }
}

/// `1 - t^-0.8` for step `t >= 1`.
pub fn decay_rate(step: u64) -> f64 {
    1.0 - (step as f64).powf(-DECAY_EXPONENT)
}

/// One update of a single parameter at step `step` (1-based). Returns the
/// applied update `lr * U` so callers can inspect it.
pub fn adafactor_update<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    moments: &mut Moments,
    step: u64,
    lr: f64,
) -> Result<Vec<f64>> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adafactor_update", param.shape(), grad.shape()));
    }
    if !moments.matches(param.shape()) {
        return Err(Error::pre("adafactor_update", "optimizer state does not match the parameter shape"));
    }
    if step == 0 {
        return Err(Error::pre("adafactor_update", "steps are counted from 1"));
    }
    let g: Vec<f64> = grad.data().iter().map(|v| v.to_f64()).collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adafactor gradient"));
    }
    moments.accumulate(&g, decay_rate(step));
    let mut u: Vec<f64> = g.iter().zip(moments.estimate()).map(|(g, v)| g / v.sqrt()).collect();
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
    let scale = lr / (rms / CLIP_THRESHOLD).max(1.0);
    for (p, u) in param.data_mut().iter_mut().zip(u.iter_mut()) {
        *u *= scale;
        *p = T::from_f64(p.to_f64() - *u);
    }
    Ok(u)
}

/// Optimizer state for every trainable parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct AdaFactor {
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdaFactor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<&Moments> {
        self.moments.get(index)?.as_ref()
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// `grads` is indexed like the store. A non-finite gradient anywhere
    /// rejects the whole step and leaves parameters and state untouched.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::pre("adafactor", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite("adafactor gradient"));
        }
        self.moments.resize(params.len(), None);
        let step = self.step + 1;
        let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments::for_shape(g.shape()));
            adafactor_update(params.get_mut(id), g, slot, step, lr)?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decay_schedule() {
        assert_eq!(decay_rate(1), 0.0);
        assert!((decay_rate(2) - (1.0 - 2f64.powf(-0.8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let before = p.clone();
        let mut m = Moments::for_shape(&[3, 4]);
        adafactor_update(&mut p, &Tensor::zeros(&[3, 4]), &mut m, 1, 1e-2).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_scalar_step_moves_by_lr() {
        for g in [3.0, -0.25, 1e-4] {
            let mut p = Tensor::<f64>::full(&[1], 1.0);
            let mut m = Moments::for_shape(&[1]);
            adafactor_update(&mut p, &Tensor::full(&[1], g), &mut m, 1, 6e-4).unwrap();
            let moved = 1.0 - p.data()[0];
            assert!((moved - 6e-4 * f64::signum(g)).abs() < 1e-15, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn large_updates_are_clipped_to_unit_rms() {
        // after a huge gradient the accumulator lags, so U would exceed 1 in RMS
        let mut p = Tensor::<f64>::zeros(&[4]);
        let mut m = Moments::for_shape(&[4]);
        adafactor_update(&mut p, &Tensor::full(&[4], 1e-3), &mut m, 1, 1.0).unwrap();
        let u = adafactor_update(&mut p, &Tensor::full(&[4], 10.0), &mut m, 2, 1.0).unwrap();
        let rms = (u.iter().map(|x| x * x).sum::<f64>() / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12, "{rms}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[2, 2]), true).unwrap();
        let b = store.add("b", Tensor::ones(&[2]), true).unwrap();
        let before = store.clone();
        let mut opt = AdaFactor::new();
        let mut bad = vec![Some(Tensor::ones(&[2, 2])), Some(Tensor::full(&[2], f64::NAN))];
        assert!(matches!(opt.step(&mut store, &bad, 0.1), Err(Error::NonFinite(_))));
        assert!(store.bit_eq(&before));
        assert_eq!(opt.step_count(), 0);
        bad[1] = Some(Tensor::ones(&[2]));
        opt.step(&mut store, &bad, 0.1).unwrap();
        assert_eq!(opt.step_count(), 1);
        assert!(store.get(a).data().iter().all(|&v| v < 1.0));
        assert!(store.get(b).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut store = ParamStore::<f64>::new();
        store.add("buf", Tensor::ones(&[3]), false).unwrap();
        let before = store.clone();
        AdaFactor::new().step(&mut store, &[Some(Tensor::ones(&[3]))], 0.1).unwrap();
        assert!(store.bit_eq(&before));
    }

    fn full_moment(grads: &[Vec<f64>]) -> Vec<f64> {
        let mut v = vec![0.0; grads[0].len()];
        for (t, g) in grads.iter().enumerate() {
            let beta = decay_rate(t as u64 + 1);
            for (v, g) in v.iter_mut().zip(g) {
                *v = beta * *v + (1.0 - beta) * (g * g + EPS1);
            }
        }
        v
    }

    fn factored_moment(n: usize, m: usize, grads: &[Vec<f64>]) -> Vec<f64> {
        let mut mom = Moments::for_shape(&[n, m]);
        for (t, g) in grads.iter().enumerate() {
            mom.accumulate(g, decay_rate(t as u64 + 1));
        }
        mom.estimate()
    }

    fn rel_frobenius(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn outer(u: &[f64], w: &[f64]) -> Vec<f64> {
        u.iter().flat_map(|&a| w.iter().map(move |&b| a * b)).collect()
    }

    #[test]
    fn rank_one_factoring_by_hand() {
        // g = [1 2; 3 6]: g² rows sum to 5, 45 and columns to 10, 40
        let g = vec![1.0, 2.0, 3.0, 6.0];
        let v = factored_moment(2, 2, &[g.clone()]);
        let expected: Vec<f64> = g.iter().map(|x| x * x).collect();
        for (a, b) in v.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    proptest! {
        #[test]
        fn rank_one_factored_estimate_is_exact(
            n in 1usize..6,
            m in 1usize..6,
            steps in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect();
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect();
            // repeated rank-1 gradients with varying overall scale keep g² rank one
            let grads: Vec<Vec<f64>> = (0..steps)
                .map(|_| {
                    let s = rng.gen_range(0.5..2.0);
                    outer(&u, &w).into_iter().map(|x| x * s).collect()
                })
                .collect();
            let err = rel_frobenius(&factored_moment(n, m, &grads), &full_moment(&grads));
            prop_assert!(err < 1e-12, "relative error {}", err);
        }

        #[test]
        fn near_rank_one_estimate_within_ten_percent(
            n in 2usize..8,
            m in 2usize..8,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..2.0)).collect();
            // rank-1 gradient with independent elementwise noise up to 4%, so g² is
            // within about 8% of rank one; at 5% noise the worst case already reaches 10%
            let g: Vec<f64> = outer(&u, &w).iter().map(|a| a * (1.0 + rng.gen_range(-0.04..0.04))).collect();
            let grads = vec![g.clone(), g];
            let err = rel_frobenius(&factored_moment(n, m, &grads), &full_moment(&grads));
            prop_assert!(err < 0.1, "relative error {}", err);
        }

        #[test]
        fn accumulators_stay_non_negative(values in proptest::collection::vec(-1e3f64..1e3, 12), steps in 1u64..6) {
            let mut p = Tensor::<f64>::zeros(&[3, 4]);
            let g = Tensor::new(&[3, 4], values).unwrap();
            let mut m = Moments::for_shape(&[3, 4]);
            for t in 1..=steps {
                adafactor_update(&mut p, &g, &mut m, t, 1e-3).unwrap();
            }
            if let Moments::Factored { rows, cols } = &m {
                prop_assert!(rows.iter().chain(cols).all(|&x| x >= 0.0));
            }
        }
    }
}
