//! Central-difference verification of tape gradients (64-bit only).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Probe at most this many coordinates per parameter (all when `None`).
    pub max_probes_per_param: Option<usize>,
    /// Seed for choosing probed coordinates.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_probes_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ProbeError>,
    pub probes: usize,
    /// Coordinates passed over because `x ± h` moved some ReLU input across
    /// zero, where the objective has no derivative.
    pub skipped_kinks: usize,
}

/// Objective value plus the ReLU sign fingerprint of the evaluation.
fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<(f64, Option<u64>)>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::inference_with_kink_tracking();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound)?;
    let v = out.value().item();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient check objective"));
    }
    Ok((v, tape.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar `f` with `(f(x+h) - f(x-h)) / 2h`
/// for every trainable parameter of `store`. The relative error of a coordinate
/// is `|a - b| / max(|a|, |b|, 1e-8)`; the maximum over probes is reported.
///
/// A coordinate whose `x ± h` evaluations put any ReLU input on a different
/// side of zero than at `x` straddles a kink; it is skipped and, when probes
/// are capped, replaced by another randomly chosen coordinate.
pub fn check_gradients<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound)?;
    if !out.value().item().is_finite() {
        return Err(Error::NonFinite("gradient check objective"));
    }
    let grads = bound.gradients(&tape.backward(&out)?);
    drop(bound);

    let (_, base_kinks) = eval(store, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe_store = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
        skipped_kinks: 0,
    };
    let h = opts.step;
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let mut order: Vec<usize> = (0..n).collect();
        let wanted = match opts.max_probes_per_param {
            Some(k) if k < n => {
                order.shuffle(&mut rng);
                k
            }
            _ => n,
        };
        let mut accepted = 0;
        for i in order {
            if accepted == wanted {
                break;
            }
            let orig = p.value.data()[i];
            probe_store.get_mut(id).data_mut()[i] = orig + h;
            let (plus, kinks_plus) = eval(&probe_store, &f)?;
            probe_store.get_mut(id).data_mut()[i] = orig - h;
            let (minus, kinks_minus) = eval(&probe_store, &f)?;
            probe_store.get_mut(id).data_mut()[i] = orig;
            if kinks_plus != base_kinks || kinks_minus != base_kinks {
                report.skipped_kinks += 1;
                continue;
            }
            accepted += 1;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.probes += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(ProbeError {
                    param: p.name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
