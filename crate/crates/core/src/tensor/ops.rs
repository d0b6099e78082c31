//! Differentiable primitives used by the model.

use std::rc::Rc;

use super::autograd::{NormLayout, Op};
use super::kernels::{self, ConvGeom, KSIZE};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// `x · w (+ b)` over the last axis of `x`.
pub fn linear<'t, T: Real>(x: &Var<'t, T>, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
    let y = x.matmul(w, false)?;
    match b {
        Some(b) => {
            if b.shape() != [w.shape()[1]] {
                return Err(Error::shape("linear bias", w.shape(), b.shape()));
            }
            y.add_broadcast(b)
        }
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

pub fn activation<'t, T: Real>(x: &Var<'t, T>, kind: Activation) -> Var<'t, T> {
    match kind {
        Activation::Relu => {
            x.tape().note_kinks(x.value().data());
            let t = x.value().map(|v| if v > T::ZERO { v } else { T::ZERO });
            x.derive(t, Op::Relu(x.input()), x.is_tracked())
        }
        Activation::Gelu => {
            let t = x.value().map(kernels::gelu);
            x.derive(t, Op::Gelu(x.input()), x.is_tracked())
        }
    }
}

/// Which keys each softmax row may attend to.
///
/// Rows of the input are laid out as `[batch, groups, queries, keys]`; `groups`
/// is the number of heads sharing a batch item's key mask.
#[derive(Clone, Debug, Default)]
pub struct SoftmaxMask {
    /// `[batch, keys]`, `true` marks a real (attendable) key.
    pub key_valid: Option<Rc<Vec<bool>>>,
    pub causal: bool,
    pub groups: usize,
    pub queries: usize,
}

impl SoftmaxMask {
    fn allowed(&self, keys: usize) -> impl Fn(usize, usize) -> bool + '_ {
        move |row, k| {
            let q = row % self.queries.max(1);
            if self.causal && k > q {
                return false;
            }
            match &self.key_valid {
                Some(valid) => {
                    let b = row / (self.groups.max(1) * self.queries.max(1));
                    valid[b * keys + k]
                }
                None => true,
            }
        }
    }
}

/// Softmax over the last axis with max subtraction. Rows with no admissible
/// finite entry are rejected.
pub fn softmax<'t, T: Real>(x: &Var<'t, T>, mask: Option<&SoftmaxMask>) -> Result<Var<'t, T>> {
    let cols = x.value().last_dim();
    let out = match mask {
        Some(m) => {
            if let Some(valid) = &m.key_valid {
                let rows = x.value().len() / cols;
                let batches = rows / (m.groups.max(1) * m.queries.max(1));
                if valid.len() != batches * cols {
                    return Err(Error::shape("softmax mask", x.shape(), &[valid.len()]));
                }
            }
            kernels::softmax_rows(x.value().data(), cols, m.allowed(cols))
        }
        None => kernels::softmax_rows(x.value().data(), cols, |_, _| true),
    };
    let data = out.ok_or_else(|| Error::pre("softmax", "a row has no unmasked finite entry"))?;
    let t = Tensor::new(x.shape(), data)?;
    Ok(x.derive(t, Op::Softmax(x.input()), x.is_tracked()))
}

/// Layer normalization over the last axis followed by `gamma * x̂ + beta`.
pub fn layer_norm<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let d = x.value().last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let xv = x.value().data();
    let rows = xv.len() / d;
    let n = T::from_f64(d as f64);
    let mut xhat = vec![T::ZERO; xv.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (xr, hr) in xv.chunks(d).zip(xhat.chunks_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::ONE / (var + T::from_f64(eps)).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * r;
        }
        rstd.push(r);
    }
    let (g, b) = (gamma.value().data(), beta.value().data());
    let data = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| g[i % d] * h + b[i % d])
        .collect();
    let t = Tensor::new(x.shape(), data)?;
    let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
    Ok(x.derive(
        t,
        Op::Normalize {
            x: x.input(),
            gamma: gamma.input(),
            beta: beta.input(),
            xhat,
            rstd,
            layout: NormLayout::Rows { d },
        },
        tracked,
    ))
}

/// Running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn identity(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving update with the observed batch statistics.
    pub fn update(&mut self, batch: &BatchNormStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running statistics.
    Infer(&'a BatchNormStats),
}

/// Batch normalization of `[N, C, ...]` per channel.
///
/// In train mode the returned statistics are the batch mean and the unbiased
/// batch variance, ready for [`BatchNormStats::update`].
pub fn batch_norm<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    mode: BatchNormMode<'_>,
) -> Result<(Var<'t, T>, Option<BatchNormStats>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("batch_norm", shape, gamma.shape()));
    }
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", shape, gamma.shape()));
    }
    let xv = x.value().data();
    let (xhat, rstd, stats, batch_stats) = match mode {
        BatchNormMode::Train => {
            let (xhat, rstd, means, vars) = kernels::normalize_groups(
                xv,
                c,
                |ch| {
                    (0..n)
                        .flat_map(|b| {
                            let base = (b * c + ch) * s;
                            base..base + s
                        })
                        .collect()
                },
                BATCH_NORM_EPS,
            );
            let count = (n * s) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let stats = BatchNormStats {
                mean: means.iter().map(|m| m.to_f64()).collect(),
                var: vars.iter().map(|v| v.to_f64() * unbias).collect(),
            };
            (xhat, rstd, Some(stats), true)
        }
        BatchNormMode::Infer(running) => {
            if running.mean.len() != c || running.var.len() != c {
                return Err(Error::State(format!(
                    "batch_norm running statistics cover {} channels, input has {c}",
                    running.mean.len()
                )));
            }
            let rstd: Vec<T> = running
                .var
                .iter()
                .map(|&v| T::from_f64(1.0 / (v + BATCH_NORM_EPS).sqrt()))
                .collect();
            let xhat = xv
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / s) % c;
                    (v - T::from_f64(running.mean[ch])) * rstd[ch]
                })
                .collect();
            (xhat, rstd, None, false)
        }
    };
    let (g, b) = (gamma.value().data(), beta.value().data());
    let data = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let ch = (i / s) % c;
            g[ch] * h + b[ch]
        })
        .collect();
    let t = Tensor::new(shape, data)?;
    let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
    let y = x.derive(
        t,
        Op::Normalize {
            x: x.input(),
            gamma: gamma.input(),
            beta: beta.input(),
            xhat,
            rstd,
            layout: NormLayout::Channels {
                n,
                c,
                s,
                batch_stats,
            },
        },
        tracked,
    );
    Ok((y, stats))
}

/// 3×3 convolution of `[N, C_in, F, T]` with SAME padding: the output extent is
/// `ceil(in / stride)` on each axis, with any odd padding on the trailing edge.
pub fn conv2d<'t, T: Real>(x: &Var<'t, T>, kernel: &Var<'t, T>, stride: (usize, usize)) -> Result<Var<'t, T>> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || ks[2] != KSIZE || ks[3] != KSIZE {
        return Err(Error::shape("conv2d", xs, ks));
    }
    if xs[1] != ks[1] {
        return Err(Error::shape("conv2d channels", xs, ks));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::pre("conv2d", "strides must be positive"));
    }
    let (ho, pt, _) = kernels::same_padding(xs[2], stride.0, KSIZE);
    let (wo, pl, _) = kernels::same_padding(xs[3], stride.1, KSIZE);
    let geom = ConvGeom {
        n: xs[0],
        c_in: xs[1],
        c_out: ks[0],
        h: xs[2],
        w: xs[3],
        ho,
        wo,
        sh: stride.0,
        sw: stride.1,
        pt,
        pl,
    };
    let data = geom.forward(x.value().data(), kernel.value().data());
    let t = Tensor::new(&[geom.n, geom.c_out, ho, wo], data)?;
    let tracked = x.is_tracked() || kernel.is_tracked();
    Ok(x.derive(
        t,
        Op::Conv2d {
            x: x.input(),
            w: kernel.input(),
            geom,
        },
        tracked,
    ))
}

/// Gathers rows of `table` (`[V, d]`); the result has shape `out_shape ++ [d]`.
pub fn embedding<'t, T: Real>(table: &Var<'t, T>, ids: &[usize], out_shape: &[usize]) -> Result<Var<'t, T>> {
    let ts = table.shape();
    if ts.len() != 2 {
        return Err(Error::shape("embedding", ts, &[ids.len()]));
    }
    let (v, d) = (ts[0], ts[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::pre("embedding", format!("index {bad} out of range for {v} rows")));
    }
    if out_shape.iter().product::<usize>() != ids.len() {
        return Err(Error::shape("embedding", out_shape, &[ids.len()]));
    }
    let tv = table.value().data();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(&tv[i * d..(i + 1) * d]);
    }
    let mut shape = out_shape.to_vec();
    shape.push(d);
    let t = Tensor::new(&shape, data)?;
    Ok(table.derive(
        t,
        Op::Embedding {
            table: table.input(),
            ids: Rc::new(ids.to_vec()),
        },
        table.is_tracked(),
    ))
}

/// Mean negative log-likelihood of `targets` under row-softmax of `logits [N, V]`,
/// skipping positions equal to `ignore_id`.
pub fn cross_entropy_loss<'t, T: Real>(
    logits: &Var<'t, T>,
    targets: &[usize],
    ignore_id: usize,
) -> Result<Var<'t, T>> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != targets.len() {
        return Err(Error::shape("cross_entropy", ls, &[targets.len()]));
    }
    let v = ls[1];
    let lv = logits.value().data();
    let mut probs = vec![T::ZERO; lv.len()];
    let mut kept = Vec::with_capacity(targets.len());
    let mut total = T::ZERO;
    let mut count = 0usize;
    for (row, &t) in targets.iter().enumerate() {
        let lr = &lv[row * v..(row + 1) * v];
        let max = lr.iter().copied().fold(T::NEG_INFINITY, T::max);
        let pr = &mut probs[row * v..(row + 1) * v];
        let mut sum = T::ZERO;
        for (p, &l) in pr.iter_mut().zip(lr) {
            *p = (l - max).exp();
            sum += *p;
        }
        for p in pr.iter_mut() {
            *p /= sum;
        }
        if t == ignore_id {
            kept.push(None);
            continue;
        }
        if t >= v {
            return Err(Error::pre("cross_entropy", format!("target {t} out of range for {v} classes")));
        }
        total += sum.ln() + max - lr[t];
        count += 1;
        kept.push(Some(t));
    }
    if count == 0 {
        return Err(Error::pre("cross_entropy", "every position is ignored"));
    }
    let loss = total / T::from_f64(count as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok(logits.derive(
        Tensor::scalar(loss),
        Op::CrossEntropy {
            logits: logits.input(),
            probs,
            targets: kept,
            count,
        },
        logits.is_tracked(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use approx::assert_abs_diff_eq;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(t2(&[&[1.0, 2.0]]));
        let y = linear(&x, &tape.constant(Tensor::eye(2)), None).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);

        let b = tape.constant(Tensor::new(&[3], vec![1.0; 3]).unwrap());
        let y = linear(&x, &tape.constant(Tensor::zeros(&[2, 3])), Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 1.0]);

        let w = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.value().data(), &[1.0, 4.0]);

        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        let err = linear(&x, &bad, None).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(err.to_string().contains("[1, 2]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 2.0, 0.0]).unwrap());
        assert_eq!(activation(&x, Activation::Relu).value().data(), &[0.0, 2.0, 0.0]);
        let g = activation(&x, Activation::Gelu);
        assert_eq!(g.value().data()[2], 0.0);
        // gelu(2) = 2 * Phi(2)
        assert_abs_diff_eq!(g.value().data()[1], 2.0 * 0.977_249_868_051_820_8, epsilon = 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::inference();
        let s = softmax(&tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap()), None).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = softmax(&tape.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap()), None).unwrap();
        assert_abs_diff_eq!(s.value().data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.value().data()[1], 0.75, epsilon = 1e-12);

        let neg = tape.constant(Tensor::new(&[2], vec![f64::NEG_INFINITY; 2]).unwrap());
        assert!(softmax(&neg, None).is_err());
    }

    #[test]
    fn softmax_mask_zeroes_disallowed_keys() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let mask = SoftmaxMask {
            key_valid: Some(Rc::new(vec![true, true, false])),
            causal: true,
            groups: 1,
            queries: 3,
        };
        let y = softmax(&x, Some(&mask)).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.5, 0.5, 0.0]);
        let none = SoftmaxMask {
            key_valid: Some(Rc::new(vec![false, false, false])),
            causal: false,
            groups: 1,
            queries: 3,
        };
        assert!(softmax(&x, Some(&none)).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::inference();
        let ones = tape.constant(Tensor::ones(&[2]));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(t2(&[&[4.0, 4.0]]));
        assert_eq!(layer_norm(&c, &ones, &zeros, 1e-5).unwrap().value().data(), &[0.0, 0.0]);
        let x = tape.constant(t2(&[&[1.0, 3.0]]));
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        assert_abs_diff_eq!(y.value().data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.value().data()[1], 1.0, epsilon = 1e-9);
        let fives = tape.constant(Tensor::full(&[2], 5.0));
        let z = layer_norm(&x, &ones, &fives, 1e-12).unwrap();
        assert_abs_diff_eq!(z.value().data()[0], 4.0, epsilon = 1e-9);
    }

    #[test]
    fn batch_norm_examples() {
        let tape = Tape::<f64>::inference();
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let x = tape.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let (y, stats) = batch_norm(&x, &g, &b, BatchNormMode::Train).unwrap();
        assert_abs_diff_eq!(y.value().data()[0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(y.value().data()[1], 1.0, epsilon = 1e-4);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);

        let c = tape.constant(Tensor::full(&[3, 1, 2], 7.0));
        let (y, _) = batch_norm(&c, &g, &b, BatchNormMode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let id = BatchNormStats::identity(1);
        let (y, _) = batch_norm(&x, &g, &b, BatchNormMode::Infer(&id)).unwrap();
        assert_abs_diff_eq!(y.value().data()[1], 3.0, epsilon = 1e-4);

        let wrong = BatchNormStats::identity(2);
        assert!(matches!(
            batch_norm(&x, &g, &b, BatchNormMode::Infer(&wrong)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn running_stats_momentum() {
        let mut r = BatchNormStats::identity(1);
        r.update(
            &BatchNormStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
            BATCH_NORM_MOMENTUM,
        );
        assert_abs_diff_eq!(r.mean[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(r.var[0], 1.2, epsilon = 1e-15);
    }

    #[test]
    fn conv2d_examples() {
        let tape = Tape::<f64>::inference();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap());
        let y = conv2d(&x, &tape.constant(k), (1, 1)).unwrap();
        assert_eq!(y.value().data(), &[2.5]);

        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 2.0));
        let y = conv2d(&x, &tape.constant(Tensor::ones(&[1, 1, 3, 3])), (1, 1)).unwrap();
        assert_eq!(y.value().at(&[0, 0, 2, 2]), 18.0);
        assert_eq!(y.value().at(&[0, 0, 0, 0]), 8.0);

        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 5]));
        let y = conv2d(&x, &tape.constant(Tensor::zeros(&[2, 1, 3, 3])), (1, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 3]);

        let bad = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(matches!(conv2d(&x, &bad, (1, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::<f64>::inference();
        let u = tape.constant(Tensor::zeros(&[1, 4]));
        assert_abs_diff_eq!(cross_entropy_loss(&u, &[2], 99).unwrap().value().item(), 4f64.ln(), epsilon = 1e-12);
        let big = tape.constant(t2(&[&[50.0, 0.0, 0.0]]));
        assert!(cross_entropy_loss(&big, &[0], 99).unwrap().value().item() < 1e-12);
        let l = tape.constant(t2(&[&[3f64.ln(), 0.0]]));
        assert_abs_diff_eq!(
            cross_entropy_loss(&l, &[0], 99).unwrap().value().item(),
            -(0.75f64.ln()),
            epsilon = 1e-12
        );
        assert!(cross_entropy_loss(&l, &[99], 99).is_err());
        let two = tape.constant(t2(&[&[3f64.ln(), 0.0], &[9.0, -4.0]]));
        let with_ignored = cross_entropy_loss(&two, &[0, 99], 99).unwrap().value().item();
        assert_abs_diff_eq!(with_ignored, -(0.75f64.ln()), epsilon = 1e-12);
    }
}
