//! Reverse-mode gradients of every primitive against central differences (64-bit).

use std::rc::Rc;

use lyricfusion::tensor::ops::{
    activation, batch_norm, conv2d, cross_entropy_loss, embedding, layer_norm, linear, softmax, Activation,
    BatchNormMode, BatchNormStats, SoftmaxMask,
};
use lyricfusion::tensor::{check_gradients, Bound, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use lyricfusion::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` with a fixed random tensor so every output coordinate matters.
fn project<'t>(tape: &'t Tape<f64>, y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = tape.constant(randn(&mut rng, y.shape()));
    Ok(y.mul(&r)?.sum())
}

fn run<F>(name: &str, store: &ParamStore<f64>, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = check_gradients(store, f, &GradCheckOptions::default()).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name}: max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn linear_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&mut rng, &[2, m, k]), true).unwrap();
        let w = s.add("w", randn(&mut rng, &[k, n]), true).unwrap();
        let b = s.add("b", randn(&mut rng, &[n]), true).unwrap();
        run("linear", &s, |t, p| {
            let y = linear(p.get(x), p.get(w), Some(p.get(b)))?;
            project(t, &y, seed)
        });
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cols = rng.gen_range(1..6);
        let x = s.add("x", randn(&mut rng, &[3, cols]), true).unwrap();
        for kind in [Activation::Relu, Activation::Gelu] {
            run("activation", &s, |t, p| project(t, &activation(p.get(x), kind), seed));
        }
    }
}

#[test]
fn softmax_gradients_plain_and_masked() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, h, q, k) = (2, rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..5));
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&mut rng, &[b * h, q, k]), true).unwrap();
        let mut valid: Vec<bool> = (0..b * k).map(|_| rng.gen_bool(0.7)).collect();
        for bi in 0..b {
            valid[bi * k] = true;
        }
        let mask = SoftmaxMask {
            key_valid: Some(Rc::new(valid)),
            causal: q == k,
            groups: h,
            queries: q,
        };
        run("softmax", &s, |t, p| project(t, &softmax(p.get(x), None)?, seed));
        run("softmax masked", &s, |t, p| project(t, &softmax(p.get(x), Some(&mask))?, seed));
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..7);
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&mut rng, &[3, d]), true).unwrap();
        let g = s.add("g", randn(&mut rng, &[d]), true).unwrap();
        let b = s.add("b", randn(&mut rng, &[d]), true).unwrap();
        run("layer_norm", &s, |t, p| {
            project(t, &layer_norm(p.get(x), p.get(g), p.get(b), 1e-5)?, seed)
        });
    }
}

#[test]
fn batch_norm_gradients_both_modes() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&mut rng, &[n, c, 2, 3]), true).unwrap();
        let g = s.add("g", randn(&mut rng, &[c]), true).unwrap();
        let b = s.add("b", randn(&mut rng, &[c]), true).unwrap();
        let running = BatchNormStats {
            mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
        };
        run("batch_norm train", &s, |t, p| {
            let (y, _) = batch_norm(p.get(x), p.get(g), p.get(b), BatchNormMode::Train)?;
            project(t, &y, seed)
        });
        run("batch_norm infer", &s, |t, p| {
            let (y, _) = batch_norm(p.get(x), p.get(g), p.get(b), BatchNormMode::Infer(&running))?;
            project(t, &y, seed)
        });
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&mut rng, &[2, cin, h, w]), true).unwrap();
        let k = s.add("k", randn(&mut rng, &[cout, cin, 3, 3]), true).unwrap();
        run("conv2d", &s, |t, p| project(t, &conv2d(p.get(x), p.get(k), stride)?, seed));
    }
}

#[test]
fn embedding_and_cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (rng.gen_range(2..6), rng.gen_range(1..4));
        let mut s = ParamStore::new();
        let table = s.add("table", randn(&mut rng, &[v, d]), true).unwrap();
        let w = s.add("w", randn(&mut rng, &[d, v]), true).unwrap();
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..v)).collect();
        let mut targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..v)).collect();
        targets[3] = usize::MAX;
        run("embedding+cross_entropy", &s, |_, p| {
            let e = embedding(p.get(table), &ids, &[4])?;
            let logits = e.matmul(p.get(w), false)?;
            cross_entropy_loss(&logits, &targets, usize::MAX)
        });
        run("tied projection", &s, |_, p| {
            let e = embedding(p.get(table), &ids, &[4])?;
            let logits = e.matmul(p.get(table), true)?;
            cross_entropy_loss(&logits, &targets, usize::MAX)
        });
    }
}

#[test]
fn structural_op_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, m, k, n) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut s = ParamStore::new();
        let a = s.add("a", randn(&mut rng, &[g, m, k]), true).unwrap();
        let b = s.add("b", randn(&mut rng, &[g, k, n]), true).unwrap();
        let bt = s.add("bt", randn(&mut rng, &[g, n, k]), true).unwrap();
        let c = s.add("c", randn(&mut rng, &[k]), true).unwrap();
        run("bmm", &s, |t, p| project(t, &p.get(a).bmm(p.get(b), false)?, seed));
        run("bmm^T", &s, |t, p| project(t, &p.get(a).bmm(p.get(bt), true)?, seed));
        run("permute+reshape", &s, |t, p| {
            let y = p.get(a).permute(&[2, 0, 1])?.reshape(&[k, g * m])?;
            project(t, &y, seed)
        });
        run("broadcast+scale+mul", &s, |t, p| {
            let y = p.get(a).add_broadcast(p.get(c))?.scale(0.7);
            let y = y.mul(&y)?;
            project(t, &y, seed)
        });
    }
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f32>::inference();
        let cols = rng.gen_range(1..20);
        let x = Tensor::<f32>::from_fn(&[5, cols], |_| rng.gen_range(-10.0..10.0));
        let c: f32 = rng.gen_range(-50.0..50.0);
        let y = softmax(&tape.constant(x.clone()), None).unwrap();
        let ys = softmax(&tape.constant(x.map(|v| v + c)), None).unwrap();
        for r in 0..5 {
            let sum: f32 = y.value().row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-5, "row sum {sum}");
        }
        assert!(y.value().max_abs_diff(ys.value()) <= 1e-6);
    }
}

#[test]
fn layer_norm_output_moments() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f32>::inference();
        let d = rng.gen_range(4..64);
        let x = Tensor::<f32>::from_fn(&[3, d], |_| rng.gen_range(-5.0..5.0));
        let y = layer_norm(
            &tape.constant(x),
            &tape.constant(Tensor::ones(&[d])),
            &tape.constant(Tensor::zeros(&[d])),
            1e-5,
        )
        .unwrap();
        for r in 0..3 {
            let row = y.value().row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }
}

#[test]
fn conv2d_same_shape_rule_exhaustive() {
    let tape = Tape::<f32>::inference();
    for h in 1..=8 {
        for w in 1..=8 {
            for sh in 1..=8 {
                for sw in 1..=8 {
                    let x = tape.constant(Tensor::zeros(&[1, 1, h, w]));
                    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
                    let y = conv2d(&x, &k, (sh, sw)).unwrap();
                    assert_eq!(y.shape(), &[1, 1, h.div_ceil(sh), w.div_ceil(sw)]);
                }
            }
        }
    }
}

#[test]
fn exact_linear_case_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let x = s.add("x", randn(&mut rng, &[3, 4]), true).unwrap();
    let w = s.add("w", randn(&mut rng, &[4, 2]), true).unwrap();
    let report = check_gradients(
        &s,
        |_, p| Ok(linear(p.get(x), p.get(w), None)?.sum()),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn non_finite_objective_is_an_error() {
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::<f64>::full(&[1], f64::INFINITY), true).unwrap();
    assert!(check_gradients(&s, |_, p| Ok(p.get(x).sum()), &GradCheckOptions::default()).is_err());
}

#[test]
fn coordinates_straddling_a_relu_kink_are_skipped() {
    let mut s = ParamStore::new();
    // the middle entry sits within h of zero, so x ± h flips its sign
    let x = s.add("x", Tensor::new(&[3], vec![0.5, 3e-6, -0.4]).unwrap(), true).unwrap();
    let report = check_gradients(
        &s,
        |_, p| Ok(activation(p.get(x), Activation::Relu).sum()),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.skipped_kinks, 1);
    assert_eq!(report.probes, 2);
    assert!(report.max_rel_error < 1e-9, "{report:?}");

    let capped = check_gradients(
        &s,
        |_, p| Ok(activation(p.get(x), Activation::Relu).sum()),
        &GradCheckOptions {
            max_probes_per_param: Some(2),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert_eq!(capped.probes, 2);
}
