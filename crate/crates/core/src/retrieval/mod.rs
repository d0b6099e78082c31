//! Text-to-song retrieval: embed one generated interpretation per song, rank
//! songs against sentence queries by cosine similarity and score with MRR.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::metrics::{self, RankResult};
use crate::model::{DecodeMode, FusionModel};
use crate::tensor::checkpoint::{read_container, write_container};
use crate::tensor::Tensor;
use crate::text::{TokenBatch, Vocabulary};

/// Number of hash buckets of [`TfIdfEmbedder`].
pub const TFIDF_BUCKETS: usize = 1 << 14;
/// Sentences shorter than this many characters never become queries.
pub const MIN_QUERY_CHARS: usize = 20;
pub const INDEX_MANIFEST: &str = "index.json";

/// Maps text to a unit vector of fixed dimension.
pub trait Embedder {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

fn normalize(v: &[f64], what: &'static str) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::pre("embed", format!("{what} has no usable features")));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

/// 32-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

pub fn bucket(token: &str) -> usize {
    fnv1a(token.as_bytes()) as usize % TFIDF_BUCKETS
}

/// Hashed TF-IDF with sublinear term frequency `1 + ln tf` and smoothed
/// inverse document frequency `ln((1 + N) / (1 + df)) + 1` over the
/// documents it was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct TfIdfEmbedder {
    idf: Vec<f64>,
}

impl TfIdfEmbedder {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut df = vec![0usize; TFIDF_BUCKETS];
        for d in docs {
            let mut seen: Vec<usize> = metrics::tokenize(d.as_ref()).iter().map(|t| bucket(t)).collect();
            seen.sort_unstable();
            seen.dedup();
            for b in seen {
                df[b] += 1;
            }
        }
        let n = docs.len() as f64;
        TfIdfEmbedder {
            idf: df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect(),
        }
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let t = Tensor::new(&[TFIDF_BUCKETS], self.idf.iter().map(|&v| v as f32).collect())?;
        write_container(dir, [("idf", &t)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_container(dir)?;
        let (_, t) = entries
            .into_iter()
            .find(|(n, _)| n == "idf")
            .ok_or_else(|| Error::State(format!("{} holds no idf table", dir.display())))?;
        if t.len() != TFIDF_BUCKETS {
            return Err(Error::shape("tfidf", t.shape(), &[TFIDF_BUCKETS]));
        }
        Ok(TfIdfEmbedder {
            idf: t.data().iter().map(|&v| v as f64).collect(),
        })
    }
}

impl Embedder for TfIdfEmbedder {
    fn id(&self) -> String {
        format!("tfidf-{TFIDF_BUCKETS}")
    }

    fn dim(&self) -> usize {
        TFIDF_BUCKETS
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
        for t in metrics::tokenize(text) {
            *tf.entry(bucket(&t)).or_insert(0) += 1;
        }
        if tf.is_empty() {
            return Err(Error::pre("embed", "text has no tokens"));
        }
        let mut v = vec![0.0; TFIDF_BUCKETS];
        for (b, n) in tf {
            v[b] = (1.0 + (n as f64).ln()) * self.idf[b];
        }
        normalize(&v, "text")
    }
}

/// Mean of the final encoder states over the non-pad positions of the
/// encoded text (no audio).
pub struct EncoderEmbedder<'a> {
    pub model: &'a FusionModel<f32>,
    pub vocab: &'a Vocabulary,
}

impl Embedder for EncoderEmbedder<'_> {
    fn id(&self) -> String {
        format!("encoder-{}", self.model.config().d_model)
    }

    fn dim(&self) -> usize {
        self.model.config().d_model
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::pre("embed", "empty text"));
        }
        let row = self.vocab.encode_unpadded(text, self.model.config().max_source_len)?;
        let n = row.ids.len();
        let states = self.model.encoder_states(&TokenBatch::from_rows(&[row])?, None)?;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for t in 0..n {
            for (m, &x) in mean.iter_mut().zip(&states.data()[t * d..(t + 1) * d]) {
                *m += x as f64 / n as f64;
            }
        }
        normalize(&mean, "encoder mean")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub embedder: String,
    pub dim: usize,
    pub song_ids: Vec<String>,
}

/// Unit vectors keyed by song id, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    embedder: String,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingIndex {
    /// Normalises each vector; all must share one dimension.
    pub fn from_vectors(embedder: impl Into<String>, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        let mut idx = EmbeddingIndex {
            embedder: embedder.into(),
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        };
        for (id, v) in entries {
            let v = normalize(&v, "index vector")?;
            idx.insert(id, v)?;
        }
        Ok(idx)
    }

    fn insert(&mut self, id: String, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("embedding index", &[v.len()], &[self.dim]));
        }
        if self.ids.contains(&id) {
            return Err(Error::Duplicate(id));
        }
        self.ids.push(id);
        self.vectors.push(v);
        Ok(())
    }

    /// Embeds `(song_id, text)` documents. Documents that cannot be embedded
    /// are skipped with a warning.
    pub fn build(docs: &[(String, String)], embedder: &dyn Embedder) -> Result<Self> {
        let mut idx = EmbeddingIndex {
            embedder: embedder.id(),
            dim: embedder.dim(),
            ids: Vec::new(),
            vectors: Vec::new(),
        };
        for (id, text) in docs {
            match embedder.embed(text) {
                Ok(v) => idx.insert(id.clone(), v)?,
                Err(e) => warn!("song `{id}` left out of the index: {e}"),
            }
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|i| i == id).map(|k| self.vectors[k].as_slice())
    }

    /// Song ids with cosine similarity to `q`, best first; equal scores are
    /// ordered by ascending song id.
    pub fn rank_vector(&self, q: &[f32]) -> Result<Vec<(String, f64)>> {
        if self.is_empty() {
            return Err(Error::pre("query_rank", "empty index"));
        }
        if q.len() != self.dim {
            return Err(Error::shape("query_rank", &[q.len()], &[self.dim]));
        }
        let mut scored: Vec<(String, f64)> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.clone(), cosine(q, v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(scored)
    }

    /// Writes `index.json` and a tensor container with one entry per song.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<Tensor<f32>> = self
            .vectors
            .iter()
            .map(|v| Tensor::new(&[self.dim], v.clone()))
            .collect::<Result<_>>()?;
        write_container(dir, self.ids.iter().map(String::as_str).zip(&tensors))?;
        let manifest = IndexManifest {
            embedder: self.embedder.clone(),
            dim: self.dim,
            song_ids: self.ids.clone(),
        };
        std::fs::write(dir.join(INDEX_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let manifest: IndexManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let mut by_name: HashMap<String, Tensor<f32>> = read_container(dir)?.into_iter().collect();
        let mut idx = EmbeddingIndex {
            embedder: manifest.embedder,
            dim: manifest.dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        };
        for id in manifest.song_ids {
            let t = by_name
                .remove(&id)
                .ok_or_else(|| Error::State(format!("index container lacks song `{id}`")))?;
            idx.insert(id, t.into_data())?;
        }
        Ok(idx)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

pub fn query_rank(q: &str, index: &EmbeddingIndex, embedder: &dyn Embedder) -> Result<Vec<String>> {
    check_embedder(index, embedder)?;
    Ok(index.rank_vector(&embedder.embed(q)?)?.into_iter().map(|(id, _)| id).collect())
}

fn check_embedder(index: &EmbeddingIndex, embedder: &dyn Embedder) -> Result<()> {
    if index.embedder != embedder.id() || index.dim != embedder.dim() {
        return Err(Error::Config(format!(
            "index built with `{}` ({}-d) queried with `{}` ({}-d)",
            index.embedder,
            index.dim,
            embedder.id(),
            embedder.dim()
        )));
    }
    Ok(())
}

/// A song to put in the retrieval database.
pub struct SongInput<'a> {
    pub song_id: &'a str,
    pub lyrics: &'a str,
    pub audio: Option<&'a MelSpectrogram>,
}

/// Greedy-generates one interpretation per song. Songs whose generation fails
/// are skipped with a warning.
pub fn generate_database(
    model: &FusionModel<f32>,
    vocab: &Vocabulary,
    songs: &[SongInput<'_>],
    mode: DecodeMode,
    max_new: usize,
) -> Vec<(String, String)> {
    songs
        .iter()
        .filter_map(|s| match model.generate(vocab, s.lyrics, s.audio, mode, max_new) {
            Ok(text) => Some((s.song_id.to_string(), text)),
            Err(e) => {
                warn!("generation failed for song `{}`: {e}", s.song_id);
                None
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub song_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuerySet {
    pub queries: Vec<Query>,
}

/// Sentences ending in `.`, `!` or `?` (or the end of text), trimmed, of at
/// least [`MIN_QUERY_CHARS`] characters.
pub fn sentences(text: &str) -> Vec<String> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| s.chars().count() >= MIN_QUERY_CHARS)
        .map(String::from)
        .collect()
}

/// One uniformly chosen sentence per song, pooling the sentences of all its
/// references. Songs appear in order of first mention.
pub fn make_queries(references: &[(String, String)], seed: u64) -> RetrievalQuerySet {
    let mut order: Vec<&str> = Vec::new();
    let mut pool: HashMap<&str, Vec<String>> = HashMap::new();
    for (id, text) in references {
        let entry = pool.entry(id.as_str()).or_insert_with(|| {
            order.push(id);
            Vec::new()
        });
        entry.extend(sentences(text));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = RetrievalQuerySet::default();
    for id in order {
        let cands = &pool[id];
        if cands.is_empty() {
            warn!("song `{id}` has no sentence of at least {MIN_QUERY_CHARS} characters; no query");
            continue;
        }
        set.queries.push(Query {
            text: cands[rng.gen_range(0..cands.len())].clone(),
            song_id: id.to_string(),
        });
    }
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub embedder: String,
    pub database_size: usize,
    pub mrr: f64,
    pub ranks: Vec<RankResult>,
}

pub fn evaluate_retrieval(
    queries: &RetrievalQuerySet,
    index: &EmbeddingIndex,
    embedder: &dyn Embedder,
) -> Result<RetrievalReport> {
    let mut ranks = Vec::with_capacity(queries.queries.len());
    for q in &queries.queries {
        if index.vector(&q.song_id).is_none() {
            return Err(Error::State(format!("query target `{}` is not in the index", q.song_id)));
        }
        let order = query_rank(&q.text, index, embedder)?;
        let k = order.iter().position(|id| *id == q.song_id).expect("checked membership") + 1;
        ranks.push(RankResult::new(q.text.clone(), k)?);
    }
    let ks: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok(RetrievalReport {
        embedder: index.embedder.clone(),
        database_size: index.len(),
        mrr: metrics::mrr(&ks, index.len())?,
        ranks,
    })
}

/// Mean MRR when database and queries are independent random unit vectors:
/// `trials` databases of `n` songs, `queries_per_trial` queries each.
pub fn random_embedding_mrr(n: usize, dim: usize, trials: usize, queries_per_trial: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)).collect()
    };
    let mut total = 0.0;
    for _ in 0..trials {
        let entries: Vec<(String, Vec<f64>)> = (0..n).map(|i| (format!("{i:05}"), gauss(&mut rng))).collect();
        let index = EmbeddingIndex::from_vectors("random", entries)?;
        let mut ks = Vec::with_capacity(queries_per_trial);
        for _ in 0..queries_per_trial {
            let truth = format!("{:05}", rng.gen_range(0..n));
            let q = normalize(&gauss(&mut rng), "query")?;
            let order = index.rank_vector(&q)?;
            ks.push(order.iter().position(|(id, _)| *id == truth).expect("present") + 1);
        }
        total += metrics::mrr(&ks, n)?;
    }
    Ok(total / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<(String, String)> {
        [
            ("a", "a lament for a drowned town under the reservoir"),
            ("b", "an anthem about leaving home for the big city lights"),
            ("c", "the narrator mourns a brother lost at sea in winter"),
        ]
        .iter()
        .map(|(i, t)| (i.to_string(), t.to_string()))
        .collect()
    }

    #[test]
    fn tfidf_vectors_are_unit_and_deterministic() {
        let d = docs();
        let texts: Vec<&str> = d.iter().map(|x| x.1.as_str()).collect();
        let e = TfIdfEmbedder::fit(&texts);
        let v = e.embed(texts[0]).unwrap();
        let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(v, e.embed(texts[0]).unwrap());
        assert!(e.embed(" !? ").is_err());
    }

    #[test]
    fn disjoint_buckets_are_orthogonal() {
        let (x, y) = ("storm harbour lantern", "violin orchard candle");
        let bx: Vec<usize> = metrics::tokenize(x).iter().map(|t| bucket(t)).collect();
        let by: Vec<usize> = metrics::tokenize(y).iter().map(|t| bucket(t)).collect();
        assert!(bx.iter().all(|b| !by.contains(b)));
        let e = TfIdfEmbedder::fit(&[x, y]);
        assert_eq!(cosine(&e.embed(x).unwrap(), &e.embed(y).unwrap()), 0.0);
    }

    #[test]
    fn hand_built_ranking() {
        // query (1, 0): cosines are 0.6, 1.0 and 0.6, so b first, then a before c by id
        let idx = EmbeddingIndex::from_vectors(
            "hand",
            vec![
                ("c".into(), vec![3.0, -4.0]),
                ("a".into(), vec![3.0, 4.0]),
                ("b".into(), vec![2.0, 0.0]),
            ],
        )
        .unwrap();
        let order = idx.rank_vector(&[1.0, 0.0]).unwrap();
        let ids: Vec<&str> = order.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert!((order[1].1 - 0.6).abs() < 1e-6);
        assert!(idx.rank_vector(&[1.0]).is_err());
    }

    #[test]
    fn self_retrieval_scores_one() {
        let d = docs();
        let texts: Vec<&str> = d.iter().map(|x| x.1.as_str()).collect();
        let e = TfIdfEmbedder::fit(&texts);
        let idx = EmbeddingIndex::build(&d, &e).unwrap();
        assert_eq!(idx.len(), 3);
        for (id, text) in &d {
            let order = query_rank(text, &idx, &e).unwrap();
            assert_eq!(&order[0], id);
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, ["a", "b", "c"]);
        }
        let qs = RetrievalQuerySet {
            queries: d.iter().map(|(id, t)| Query { text: t.clone(), song_id: id.clone() }).collect(),
        };
        let rep = evaluate_retrieval(&qs, &idx, &e).unwrap();
        assert_eq!(rep.mrr, 1.0);
    }

    #[test]
    fn queries_are_seeded_sentences() {
        let refs = vec![
            ("s1".to_string(), "Short one. This sentence is long enough to be a query! Tiny?".to_string()),
            ("s2".to_string(), "too short".to_string()),
            ("s3".to_string(), "Only one sentence here that is long".to_string()),
        ];
        let q = make_queries(&refs, 7);
        assert_eq!(q, make_queries(&refs, 7));
        assert_eq!(q.queries.len(), 2);
        assert_eq!(q.queries[0].text, "This sentence is long enough to be a query");
        assert_eq!(q.queries[1].text, "Only one sentence here that is long");
        assert!(q.queries.iter().all(|x| x.text.chars().count() >= MIN_QUERY_CHARS));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = EmbeddingIndex::from_vectors("hand", vec![("x".into(), vec![1.0, 2.0]), ("y".into(), vec![0.0, 1.0])]).unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(EmbeddingIndex::load(dir.path()).unwrap(), idx);
        let e = TfIdfEmbedder::fit(&["alpha beta", "beta gamma"]);
        e.save(&dir.path().join("tfidf")).unwrap();
        let back = TfIdfEmbedder::load(&dir.path().join("tfidf")).unwrap();
        assert_eq!(back.embed("alpha").unwrap(), e.embed("alpha").unwrap());
    }

    #[test]
    fn mismatched_embedder_is_rejected() {
        let idx = EmbeddingIndex::from_vectors("hand", vec![("x".into(), vec![1.0, 2.0])]).unwrap();
        let e = TfIdfEmbedder::fit(&["alpha"]);
        assert!(query_rank("alpha", &idx, &e).is_err());
    }
}
