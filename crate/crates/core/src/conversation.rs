//! Conversation models: providers of candidate next utterances with a base
//! weight `q`, plus perplexity scorers for ranking fixed candidate sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, RngCore};

use crate::corpus::{build_tfidf, TfidfModel, Utterance};
use crate::error::{Error, Result};

/// Out-of-vocabulary probability for the unigram scorer.
pub const DEFAULT_UNIGRAM_FLOOR: f64 = 1e-5;

/// A candidate next utterance with its unnormalized base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub utterance: Utterance,
    pub q_score: f64,
}

impl Candidate {
    pub fn new(utterance: Utterance, q_score: f64) -> Result<Self> {
        if !(q_score > 0.0 && q_score.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "q score must be positive, got {q_score}"
            )));
        }
        Ok(Candidate { utterance, q_score })
    }
}

/// Base conversation model `q(x_t | x_{1:t-1})`.
pub trait ConversationModel: Send + Sync {
    /// Up to `k` distinct candidate responses to `history`.
    fn candidates(
        &self,
        history: &[Utterance],
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Candidate>>;

    /// A single draw from `q`.
    fn sample(&self, history: &[Utterance], rng: &mut dyn RngCore) -> Result<Candidate>;
}

/// `k` distinct lines drawn uniformly without replacement, each weighted `1/|pool|`.
pub fn random_candidates<R: Rng + ?Sized>(
    pool: &[Utterance],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    if k > pool.len() {
        return Err(Error::NotEnoughCandidates {
            requested: k,
            available: pool.len(),
        });
    }
    let q = 1.0 / pool.len() as f64;
    Ok(index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| Candidate {
            utterance: pool[i].clone(),
            q_score: q,
        })
        .collect())
}

/// Uniform retrieval from a fixed pool, ignoring the dialogue.
#[derive(Debug, Clone)]
pub struct RandomModel {
    pool: Arc<[Utterance]>,
}

impl RandomModel {
    pub fn new(pool: Vec<Utterance>) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyIndex);
        }
        Ok(RandomModel { pool: pool.into() })
    }

    pub fn pool(&self) -> &[Utterance] {
        &self.pool
    }
}

impl ConversationModel for RandomModel {
    fn candidates(
        &self,
        _history: &[Utterance],
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Candidate>> {
        random_candidates(&self.pool, k.min(self.pool.len()), rng)
    }

    fn sample(&self, _history: &[Utterance], rng: &mut dyn RngCore) -> Result<Candidate> {
        let i = rng.random_range(0..self.pool.len());
        Candidate::new(self.pool[i].clone(), 1.0 / self.pool.len() as f64)
    }
}

type Sparse = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
enum Vectors {
    Sparse {
        tfidf: TfidfModel,
        rows: Vec<Sparse>,
    },
    Dense {
        rows: Vec<Vec<f64>>,
        lookup: HashMap<String, usize>,
    },
}

/// Exact cosine-similarity index over an utterance pool.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pool: Vec<Utterance>,
    vectors: Vectors,
}

/// Index `pool` with TF-IDF vectors from `tfidf`.
pub fn build_index(pool: Vec<Utterance>, tfidf: TfidfModel) -> Result<RetrievalIndex> {
    if pool.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let rows = pool
        .iter()
        .map(|u| tfidf.weights(u.tokens().iter().map(String::as_str)))
        .collect();
    Ok(RetrievalIndex {
        pool,
        vectors: Vectors::Sparse { tfidf, rows },
    })
}

fn sparse_dot(a: &Sparse, b: &Sparse) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

fn cosine_sparse(a: &Sparse, b: &Sparse) -> f64 {
    let na = sparse_dot(a, a).sqrt();
    let nb = sparse_dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        sparse_dot(a, b) / (na * nb)
    }
}

fn cosine_dense(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl RetrievalIndex {
    /// Index a pool with a TF-IDF model fitted on the pool itself.
    pub fn from_pool(pool: Vec<Utterance>) -> Result<Self> {
        let docs: Vec<&[String]> = pool.iter().map(Utterance::tokens).collect();
        if docs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let tfidf = build_tfidf(&docs)?;
        build_index(pool, tfidf)
    }

    /// Index precomputed dense embeddings. Queries must be pool lines (or
    /// otherwise present in the embedding table).
    pub fn from_embeddings(rows: Vec<(Utterance, Vec<f64>)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let dim = rows[0].1.len();
        if rows.iter().any(|(_, v)| v.len() != dim) {
            return Err(Error::Parse(
                "embeddings have inconsistent dimensions".into(),
            ));
        }
        let lookup = rows
            .iter()
            .enumerate()
            .map(|(i, (u, _))| (u.text().to_owned(), i))
            .collect();
        let (pool, rows): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Ok(RetrievalIndex {
            pool,
            vectors: Vectors::Dense { rows, lookup },
        })
    }

    pub fn pool(&self) -> &[Utterance] {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    /// Cosine similarity of `query` to every pool line, in pool order.
    pub fn similarities(&self, query: &Utterance) -> Result<Vec<f64>> {
        match &self.vectors {
            Vectors::Sparse { tfidf, rows } => {
                let q = tfidf.weights(query.tokens().iter().map(String::as_str));
                Ok(rows.iter().map(|r| cosine_sparse(&q, r)).collect())
            }
            Vectors::Dense { rows, lookup } => {
                let qi = lookup.get(query.text()).ok_or_else(|| {
                    Error::InvalidArgument(format!("no embedding for query {:?}", query.text()))
                })?;
                let q = &rows[*qi];
                Ok(rows.iter().map(|r| cosine_dense(q, r)).collect())
            }
        }
    }
}

/// Top-`k` pool lines by cosine similarity to `query`; ties go to the earlier
/// pool line. `q_score` is the softmax of the returned similarities.
pub fn nn_candidates(
    index: &RetrievalIndex,
    query: &Utterance,
    k: usize,
) -> Result<Vec<Candidate>> {
    nn_candidates_excluding(index, query, k, &HashSet::new())
}

/// Like [`nn_candidates`], skipping pool lines whose text is in `exclude`.
pub fn nn_candidates_excluding(
    index: &RetrievalIndex,
    query: &Utterance,
    k: usize,
    exclude: &HashSet<&str>,
) -> Result<Vec<Candidate>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let sims = index.similarities(query)?;
    let mut order: Vec<usize> = (0..sims.len())
        .filter(|&i| !exclude.contains(index.pool[i].text()))
        .collect();
    // stable sort keeps pool order among equal similarities
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order.truncate(k);
    let top: Vec<f64> = order.iter().map(|&i| sims[i]).collect();
    let max = top.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = top.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(order
        .into_iter()
        .zip(exps)
        .map(|(i, e)| Candidate {
            utterance: index.pool[i].clone(),
            q_score: e / total,
        })
        .collect())
}

/// Nearest-neighbour retrieval keyed on the last line of the dialogue.
/// Lines already spoken are never offered again.
#[derive(Debug, Clone)]
pub struct RetrievalModel {
    index: Arc<RetrievalIndex>,
    sample_k: usize,
}

impl RetrievalModel {
    /// `sample_k` is the neighbourhood size that single draws are taken from.
    pub fn new(index: RetrievalIndex, sample_k: usize) -> Self {
        RetrievalModel {
            index: Arc::new(index),
            sample_k: sample_k.max(1),
        }
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }
}

impl ConversationModel for RetrievalModel {
    fn candidates(
        &self,
        history: &[Utterance],
        k: usize,
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<Candidate>> {
        let query = history.last().ok_or_else(|| {
            Error::InvalidArgument("retrieval needs at least one line of history".into())
        })?;
        let seen: HashSet<&str> = history.iter().map(Utterance::text).collect();
        nn_candidates_excluding(&self.index, query, k, &seen)
    }

    fn sample(&self, history: &[Utterance], rng: &mut dyn RngCore) -> Result<Candidate> {
        let cands = self.candidates(history, self.sample_k, rng)?;
        sample_by_weight(&cands, rng)
            .cloned()
            .ok_or(Error::NoCandidates)
    }
}

/// Draw one candidate with probability proportional to `q_score`.
pub fn sample_by_weight<'a, R: Rng + ?Sized>(
    cands: &'a [Candidate],
    rng: &mut R,
) -> Option<&'a Candidate> {
    let total: f64 = cands.iter().map(|c| c.q_score).sum();
    if cands.is_empty() || !(total > 0.0) {
        return None;
    }
    let mut r = rng.random::<f64>() * total;
    for c in cands {
        if r < c.q_score {
            return Some(c);
        }
        r -= c.q_score;
    }
    cands.last()
}

/// Perplexity of `candidate` under a unigram model of the context lines;
/// tokens the context never uses get probability `floor`.
pub fn unigram_score(context: &[Utterance], candidate: &Utterance, floor: f64) -> Result<f64> {
    if context.is_empty() {
        return Err(Error::InvalidArgument("unigram context is empty".into()));
    }
    if candidate.tokens().is_empty() {
        return Err(Error::EmptyCandidate);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for t in context.iter().flat_map(|u| u.tokens()) {
        *counts.entry(t.as_str()).or_default() += 1;
        total += 1;
    }
    let n = candidate.tokens().len() as f64;
    let nll: f64 = candidate
        .tokens()
        .iter()
        .map(|t| match counts.get(t.as_str()) {
            Some(&c) => -(c as f64 / total as f64).ln(),
            None => -floor.ln(),
        })
        .sum();
    Ok((nll / n).exp())
}

/// Base weight from a perplexity: lower perplexity, higher weight.
pub fn perplexity_to_weight(perplexity: f64) -> f64 {
    1.0 / perplexity
}

/// Externally computed perplexities keyed by `(episode id, candidate index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScoreTable {
    scores: BTreeMap<String, Vec<f64>>,
}

impl ExternalScoreTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse `episode_id<TAB>candidate_idx<TAB>perplexity` rows. Every episode
    /// must cover indices `0..n` with no gaps or duplicates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = || {
                Error::Parse(format!(
                    "score line {}: expected `episode<TAB>idx<TAB>perplexity`",
                    n + 1
                ))
            };
            let mut parts = line.split('\t');
            let (Some(ep), Some(idx), Some(ppl), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let idx: usize = idx.trim().parse().map_err(|_| bad())?;
            let ppl: f64 = ppl.trim().parse().map_err(|_| bad())?;
            if !(ppl > 0.0 && ppl.is_finite()) {
                return Err(Error::Parse(format!(
                    "score line {}: perplexity must be positive, got {ppl}",
                    n + 1
                )));
            }
            if rows
                .entry(ep.to_owned())
                .or_default()
                .insert(idx, ppl)
                .is_some()
            {
                return Err(Error::Parse(format!(
                    "score line {}: duplicate entry ({ep}, {idx})",
                    n + 1
                )));
            }
        }
        let mut gaps = Vec::new();
        let mut scores = BTreeMap::new();
        for (ep, entries) in rows {
            let max = *entries.keys().next_back().expect("non-empty");
            let missing: Vec<String> = (0..=max)
                .filter(|i| !entries.contains_key(i))
                .map(|i| i.to_string())
                .collect();
            if !missing.is_empty() {
                gaps.push(format!("{ep}: [{}]", missing.join(", ")));
            }
            scores.insert(ep, entries.into_values().collect());
        }
        if !gaps.is_empty() {
            return Err(Error::MissingScores(gaps.join("; ")));
        }
        Ok(ExternalScoreTable { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn episode(&self, id: &str) -> Option<&[f64]> {
        self.scores.get(id).map(Vec::as_slice)
    }

    pub fn get(&self, id: &str, idx: usize) -> Option<f64> {
        self.episode(id).and_then(|s| s.get(idx).copied())
    }
}

/// Parse an embedding file: `text<TAB>comma-separated floats` per line.
pub fn parse_embeddings(text: &str) -> Result<Vec<(Utterance, Vec<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (t, v) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Parse(format!("embedding line {}: missing tab", n + 1)))?;
        let v = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("embedding line {}: {e}", n + 1)))?;
        out.push((Utterance::new(t)?, v));
    }
    Ok(out)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<(Utterance, Vec<f64>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}
