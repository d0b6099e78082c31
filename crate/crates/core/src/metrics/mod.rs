//! Text overlap metrics (ROUGE-1/2/L, a WordNet-free METEOR) and mean
//! reciprocal rank.
//!
//! All text metrics share one tokenizer: lowercase, then split on every
//! non-alphanumeric character.

mod porter;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use porter::stem;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    fn from_counts(hits: usize, cand: usize, reference: usize) -> Prf {
        if hits == 0 || cand == 0 || reference == 0 {
            return Prf::default();
        }
        let p = hits as f64 / cand as f64;
        let r = hits as f64 / reference as f64;
        Prf {
            precision: p,
            recall: r,
            f: 2.0 * p * r / (p + r),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap over pre-tokenized sequences.
pub fn rouge_n_tokens(cand: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(hits, c.values().sum(), r.values().sum())
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(cand: &[String], reference: &[String]) -> Prf {
    Prf::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Breakdown of one METEOR evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meteor {
    pub matches: usize,
    pub chunks: usize,
    pub f_mean: f64,
    pub penalty: f64,
    pub score: f64,
}

/// Unigram alignment as `(candidate index, reference index)` pairs: exact
/// matches first, then Porter-stem matches among what is left.
///
/// Both match relations are equivalences, so greedy assignment already reaches
/// the maximum number of matches. To keep chunks few, a token continues the
/// previous candidate's chunk when it can; otherwise it takes the reference
/// position that starts the longest run of further matches (leftmost on ties).
pub fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_to_ref: Vec<Option<usize>> = vec![None; cand.len()];
    let cand_stems: Vec<String> = cand.iter().map(|w| stem(w)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    let stages: [(&[String], &[String]); 2] = [(cand, reference), (&cand_stems, &ref_stems)];
    for (cs, rs) in stages {
        for i in 0..cand.len() {
            if cand_to_ref[i].is_some() {
                continue;
            }
            let continues = i
                .checked_sub(1)
                .and_then(|p| cand_to_ref[p])
                .map(|r| r + 1)
                .filter(|&r| r < rs.len() && !ref_used[r] && rs[r] == cs[i]);
            let run = |r: usize| {
                (0..)
                    .take_while(|&k| {
                        i + k < cs.len()
                            && r + k < rs.len()
                            && cand_to_ref[i + k].is_none()
                            && !ref_used[r + k]
                            && cs[i + k] == rs[r + k]
                    })
                    .count()
            };
            let longest = (0..rs.len())
                .filter(|&r| !ref_used[r] && rs[r] == cs[i])
                .map(|r| (run(r), r))
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            let pick = continues.or(longest.map(|(_, r)| r));
            if let Some(r) = pick {
                ref_used[r] = true;
                cand_to_ref[i] = Some(r);
            }
        }
    }
    cand_to_ref
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i, r)))
        .collect()
}

/// Number of runs of alignment pairs adjacent in both sequences. `pairs` must
/// be sorted by candidate index.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// `F_mean = 10PR / (R + 9P)`, `penalty = 0.5 (chunks / matches)^3`.
pub fn meteor_from_counts(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> Meteor {
    if matches == 0 {
        return Meteor::default();
    }
    let p = matches as f64 / cand_len as f64;
    let r = matches as f64 / ref_len as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    Meteor {
        matches,
        chunks,
        f_mean,
        penalty,
        score: f_mean * (1.0 - penalty),
    }
}

pub fn meteor_tokens(cand: &[String], reference: &[String]) -> Meteor {
    let pairs = align(cand, reference);
    meteor_from_counts(pairs.len(), count_chunks(&pairs), cand.len(), reference.len())
}

pub fn meteor_lite(candidate: &str, reference: &str) -> Meteor {
    meteor_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Mean of `1 / k_i` over 1-based ranks in a database of `n` items.
pub fn mrr(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::pre("mrr", "no ranks"));
    }
    if let Some(&k) = ranks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::pre("mrr", format!("rank {k} outside 1..={n}")));
    }
    Ok(ranks.iter().map(|&k| 1.0 / k as f64).sum::<f64>() / ranks.len() as f64)
}

/// `H_n / n`, the expected reciprocal rank of a uniformly random ranking.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub query: String,
    pub rank: usize,
    pub score: f64,
}

impl RankResult {
    pub fn new(query: impl Into<String>, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::pre("rank", "ranks are 1-based"));
        }
        Ok(RankResult {
            query: query.into(),
            rank,
            score: 1.0 / rank as f64,
        })
    }
}

/// Scores of one candidate/reference pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub meteor: Meteor,
}

impl PairScores {
    pub fn compute(candidate: &str, reference: &str) -> PairScores {
        let (c, r) = (tokenize(candidate), tokenize(reference));
        PairScores {
            rouge1: rouge_n_tokens(&c, &r, 1),
            rouge2: rouge_n_tokens(&c, &r, 2),
            rouge_l: rouge_l_tokens(&c, &r),
            meteor: meteor_tokens(&c, &r),
        }
    }
}

/// Corpus means of the F-scores plus the per-pair breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub pairs: Vec<PairScores>,
}

impl MetricReport {
    pub fn evaluate<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<MetricReport> {
        if candidates.len() != references.len() {
            return Err(Error::pre(
                "evaluate",
                format!("{} candidates for {} references", candidates.len(), references.len()),
            ));
        }
        if candidates.is_empty() {
            return Err(Error::pre("evaluate", "nothing to evaluate"));
        }
        let pairs: Vec<PairScores> = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| PairScores::compute(c.as_ref(), r.as_ref()))
            .collect();
        let mean = |f: fn(&PairScores) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
        Ok(MetricReport {
            rouge1: mean(|p| p.rouge1.f),
            rouge2: mean(|p| p.rouge2.f),
            rouge_l: mean(|p| p.rouge_l.f),
            meteor: mean(|p| p.meteor.score),
            pairs,
        })
    }

    /// Header plus one row of percentages: `R-1 R-2 R-L METEOR`.
    pub fn table(&self) -> String {
        let mut s = String::from("R-1\tR-2\tR-L\tMETEOR\n");
        let _ = writeln!(
            s,
            "{:.2}\t{:.2}\t{:.2}\t{:.2}",
            100.0 * self.rouge1,
            100.0 * self.rouge2,
            100.0 * self.rouge_l,
            100.0 * self.meteor
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(toks("Don't STOP, me-now!"), ["don", "t", "stop", "me", "now"]);
        assert!(toks(" ... ").is_empty());
    }

    #[test]
    fn rouge_hand_counts() {
        let r1 = rouge_n("the cat sat", "the cat ran", 1);
        assert!((r1.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r1.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r1.f - 2.0 / 3.0).abs() < 1e-15);
        let r2 = rouge_n("the cat sat", "the cat ran", 2);
        assert!((r2.f - 0.5).abs() < 1e-15);
        let rl = rouge_l("the cat sat", "the cat ran");
        assert!((rl.f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_n("a b c", "a b c", 2).f, 1.0);
        assert_eq!(rouge_n("a b", "c d", 1), Prf::default());
        assert_eq!(rouge_n("", "c d", 1), Prf::default());
        assert_eq!(rouge_l("x", ""), Prf::default());
    }

    #[test]
    fn rouge_clips_repeated_ngrams() {
        // candidate repeats "the" four times; reference has it twice
        let r = rouge_n("the the the the", "the cat the", 1);
        assert!((r.precision - 0.5).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn meteor_hand_values() {
        let m = meteor_lite("the cat", "the cat");
        assert_eq!((m.matches, m.chunks), (2, 1));
        assert!((m.penalty - 0.0625).abs() < 1e-15);
        assert!((m.score - 0.9375).abs() < 1e-15);
        assert_eq!(meteor_lite("dog", "cat").score, 0.0);
        assert_eq!(meteor_lite("", "cat").score, 0.0);
    }

    #[test]
    fn meteor_stem_stage() {
        let m = meteor_lite("running fast", "run fast");
        assert_eq!((m.matches, m.chunks), (2, 1));
        // exact "the" pairs first, stems do not steal them
        assert_eq!(align(&toks("cats the"), &toks("the cat")), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn meteor_prefers_chunk_continuation() {
        // the second "a" should follow the first into the "a b a" run
        let pairs = align(&toks("x a b a"), &toks("a q a b a"));
        assert_eq!(count_chunks(&pairs), 1, "{pairs:?}");
    }

    #[test]
    fn mrr_values() {
        assert!((mrr(&[1, 2, 4], 10).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(mrr(&[1, 1, 1], 3).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 1, 4], 4).unwrap() - 0.6875).abs() < 1e-15);
        assert!(mrr(&[0], 3).is_err());
        assert!(mrr(&[4], 3).is_err());
        assert!(mrr(&[], 3).is_err());
        assert!((random_mrr(800) - 0.009078).abs() < 1e-6);
    }

    #[test]
    fn report_identical_files_score_one() {
        let texts = ["the song is about loss", "a love letter to the city"];
        let rep = MetricReport::evaluate(&texts, &texts).unwrap();
        assert_eq!((rep.rouge1, rep.rouge2, rep.rouge_l), (1.0, 1.0, 1.0));
        assert!(rep.table().starts_with("R-1\tR-2\tR-L\tMETEOR\n100.00\t100.00\t100.00\t"));
        assert!(MetricReport::evaluate(&texts[..1], &texts).is_err());
    }

    fn brute_force_overlap(c: &[String], r: &[String], n: usize) -> usize {
        // remove each matched reference n-gram from a pool
        let mut pool: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
        let mut hits = 0;
        if c.len() >= n {
            for g in c.windows(n) {
                if let Some(pos) = pool.iter().position(|p| *p == g) {
                    pool.remove(pos);
                    hits += 1;
                }
            }
        }
        hits
    }

    fn brute_force_lcs(a: &[String], b: &[String]) -> usize {
        // longest subsequence of `a` (over all subsets) that is also one of `b`
        let is_subseq = |s: &[&String]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == *x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..max)
    }

    proptest! {
        #[test]
        fn rouge_n_matches_multiset_oracle(c in words(12), r in words(12), n in 1usize..3) {
            let got = rouge_n_tokens(&c, &r, n);
            let hits = brute_force_overlap(&c, &r, n);
            let expect = Prf::from_counts(hits, c.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1));
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn lcs_matches_exhaustive(a in words(9), b in words(9)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_force_lcs(&a, &b));
        }

        #[test]
        fn scores_bounded(c in words(10), r in words(10)) {
            let s = PairScores::compute(&c.join(" "), &r.join(" "));
            for v in [s.rouge1.f, s.rouge2.f, s.rouge_l.f, s.meteor.score] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn identical_inputs(c in words(10).prop_filter("non-empty", |c| !c.is_empty())) {
            let s = PairScores::compute(&c.join(" "), &c.join(" "));
            prop_assert_eq!(s.rouge1.f, 1.0);
            prop_assert_eq!(s.rouge_l.f, 1.0);
            prop_assert!((s.meteor.score - (1.0 - s.meteor.penalty)).abs() < 1e-12);
        }

        #[test]
        fn meteor_order_only_enters_through_chunks(c in words(8), r in words(8), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = c.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = meteor_tokens(&c, &r);
            let b = meteor_tokens(&shuffled, &r);
            prop_assert_eq!(a.matches, b.matches);
            prop_assert!((a.f_mean - b.f_mean).abs() < 1e-12);
            if a.chunks > b.chunks {
                prop_assert!(a.score <= b.score);
            }
        }
    }
}
