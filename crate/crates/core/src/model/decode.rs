//! Autoregressive search over a next-token scorer.

use crate::error::{Error, Result};
use crate::text::{BOS, EOS};

/// Exponent of the length normalisation applied to finished beam hypotheses.
pub const LENGTH_PENALTY: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            _ => s
                .strip_prefix("beam")
                .map(|k| k.trim_start_matches([':', '=']))
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k > 0)
                .map(DecodeMode::Beam)
                .ok_or_else(|| Error::Config(format!("unknown decode mode `{s}`"))),
        }
    }
}

fn check_max_new(max_new: usize) -> Result<()> {
    if max_new == 0 {
        return Err(Error::Config("max_new must be positive".into()));
    }
    Ok(())
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `next(prefix)` returns log-probabilities of the token following `prefix`
/// (which starts with bos). The result holds the generated tokens, ending in
/// eos unless `max_new` was reached first.
pub fn greedy<F>(mut next: F, max_new: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    check_max_new(max_new)?;
    let mut seq = vec![BOS];
    for _ in 0..max_new {
        let tok = argmax(&next(&seq)?) as u32;
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    seq.remove(0);
    Ok(seq)
}

fn normalized(tokens: &[u32], score: f64) -> f64 {
    score / (tokens.len().max(1) as f64).powf(LENGTH_PENALTY)
}

/// Beam search with `k` live hypotheses ranked by summed log-probability.
/// Hypotheses that emit eos leave the beam; the answer is the finished (or, at
/// the length limit, live) hypothesis with the best `sum / len^0.7`.
pub fn beam<F>(mut next: F, k: usize, max_new: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    check_max_new(max_new)?;
    if k == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_new {
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, (tokens, score)) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(tokens);
            let lp = next(&prefix)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            candidates.extend(order.into_iter().take(k).map(|t| (bi, t as u32, score + lp[t])));
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next_live = Vec::with_capacity(k);
        for (bi, tok, score) in candidates.into_iter().take(k) {
            let mut tokens = live[bi].0.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push((tokens, score));
            } else {
                next_live.push((tokens, score));
            }
        }
        live = next_live;
        if live.is_empty() || finished.len() >= k {
            break;
        }
    }
    let pool = if finished.is_empty() { live } else { finished };
    let mut best: Option<(Vec<u32>, f64)> = None;
    for (tokens, score) in pool {
        let s = normalized(&tokens, score);
        if best.as_ref().map_or(true, |(_, b)| s > *b) {
            best = Some((tokens, s));
        }
    }
    Ok(best.map(|(t, _)| t).unwrap_or_default())
}

pub fn search<F>(next: F, mode: DecodeMode, max_new: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    match mode {
        DecodeMode::Greedy => greedy(next, max_new),
        DecodeMode::Beam(k) => beam(next, k, max_new),
    }
}
