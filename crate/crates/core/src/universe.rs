//! Universe models: probabilistic classifiers `z(u | x)` over a fixed set of
//! universe labels, with a multinomial naive Bayes implementation over
//! TF-IDF-weighted token counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_tfidf, check_version, tokenize, LabeledDocument, TfidfModel, Utterance};
use crate::error::{Error, Result};

/// Minimum probability any universe may hold after classification or update.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for the simplex sum check.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub const MODEL_VERSION: u32 = 1;

pub const DEFAULT_SMOOTHING: f64 = 1.0;

/// Ordered, duplicate-free universe labels (at least two).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct UniverseSet {
    labels: Vec<String>,
}

impl UniverseSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::TooFewUniverses(labels.len()));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::DuplicateUniverse(l.clone()));
            }
        }
        Ok(UniverseSet { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for UniverseSet {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        UniverseSet::new(v)
    }
}

impl From<UniverseSet> for Vec<String> {
    fn from(s: UniverseSet) -> Self {
        s.labels
    }
}

/// A point on the probability simplex, aligned with some [`UniverseSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UniverseDistribution {
    probs: Vec<f64>,
}

impl UniverseDistribution {
    /// Validate an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} outside [0, inf)"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(UniverseDistribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        UniverseDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Normalize non-negative weights. Fails if they sum to zero or are not finite.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Numerical(format!(
                "cannot normalize weights summing to {sum}"
            )));
        }
        Ok(UniverseDistribution {
            probs: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    /// Softmax of log scores with max subtraction.
    pub fn from_log_scores(scores: &[f64]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        UniverseDistribution {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    /// Clamp every entry to at least `floor`, then renormalize.
    pub fn floored(mut self, floor: f64) -> Self {
        if self.probs.iter().any(|&p| p < floor) {
            for p in &mut self.probs {
                *p = p.max(floor);
            }
            let sum: f64 = self.probs.iter().sum();
            for p in &mut self.probs {
                *p /= sum;
            }
        }
        self
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.probs.len() as f64;
        self.probs.iter().all(|p| (p - u).abs() <= SIMPLEX_TOL)
    }
}

impl TryFrom<Vec<f64>> for UniverseDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        UniverseDistribution::new(v)
    }
}

impl From<UniverseDistribution> for Vec<f64> {
    fn from(d: UniverseDistribution) -> Self {
        d.probs
    }
}

/// Anything that maps an utterance to a distribution over universes.
pub trait UniverseModel: Send + Sync {
    fn universe_set(&self) -> &UniverseSet;
    fn classify(&self, utterance: &Utterance) -> UniverseDistribution;
}

/// Mapping from raw corpus labels to universe labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    map: BTreeMap<String, String>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, raw: impl Into<String>, universe: impl Into<String>) {
        self.map.insert(raw.into(), universe.into());
    }

    /// Every distinct label in `docs` maps to itself.
    pub fn identity(docs: &[LabeledDocument]) -> Self {
        let mut m = LabelMap::new();
        for d in docs {
            m.insert(d.label.clone(), d.label.clone());
        }
        m
    }

    /// The twenty newsgroups collapsed into five topic universes.
    pub fn newsgroups() -> Self {
        const GROUPS: &[(&str, &str)] = &[
            ("alt.atheism", "Religion"),
            ("comp.graphics", "Computers"),
            ("comp.os.ms-windows.misc", "Computers"),
            ("comp.sys.ibm.pc.hardware", "Computers"),
            ("comp.sys.mac.hardware", "Computers"),
            ("comp.windows.x", "Computers"),
            ("misc.forsale", "Recreation"),
            ("rec.autos", "Recreation"),
            ("rec.motorcycles", "Recreation"),
            ("rec.sport.baseball", "Recreation"),
            ("rec.sport.hockey", "Recreation"),
            ("sci.crypt", "Science"),
            ("sci.electronics", "Science"),
            ("sci.med", "Science"),
            ("sci.space", "Science"),
            ("soc.religion.christian", "Religion"),
            ("talk.politics.guns", "Talk"),
            ("talk.politics.mideast", "Talk"),
            ("talk.politics.misc", "Talk"),
            ("talk.religion.misc", "Talk"),
        ];
        let mut m = LabelMap::new();
        for (raw, u) in GROUPS {
            m.insert(*raw, *u);
        }
        m
    }

    /// Parse `raw_label<TAB>universe_label` lines.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut m = LabelMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (raw, u) = line.split_once('\t').ok_or_else(|| {
                Error::Parse(format!(
                    "label map line {}: expected `raw<TAB>universe`",
                    n + 1
                ))
            })?;
            let (raw, u) = (raw.trim(), u.trim());
            if raw.is_empty() || u.is_empty() {
                return Err(Error::Parse(format!(
                    "label map line {}: empty field",
                    n + 1
                )));
            }
            m.insert(raw, u);
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LabelMap::parse_tsv(&text)
    }

    pub fn get(&self, raw: &str) -> Option<&str> {
        self.map.get(raw).map(String::as_str)
    }

    /// Distinct universe labels, sorted.
    pub fn universes(&self) -> Vec<String> {
        self.map
            .values()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub smoothing: f64,
    pub remove_stopwords: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            smoothing: DEFAULT_SMOOTHING,
            remove_stopwords: true,
        }
    }
}

/// Multinomial naive Bayes with uniform universe priors.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayesModel {
    universe_set: UniverseSet,
    log_prior: Vec<f64>,
    /// `log_likelihood[universe][token_id]`
    log_likelihood: Vec<Vec<f64>>,
    smoothing: f64,
    remove_stopwords: bool,
    tfidf: TfidfModel,
    doc_counts: Vec<usize>,
}

/// Train with stop-words removed and the given additive smoothing.
pub fn train(
    docs: &[LabeledDocument],
    label_map: &LabelMap,
    smoothing: f64,
) -> Result<NaiveBayesModel> {
    train_with(
        docs,
        label_map,
        TrainOptions {
            smoothing,
            ..TrainOptions::default()
        },
    )
}

pub fn train_with(
    docs: &[LabeledDocument],
    label_map: &LabelMap,
    opts: TrainOptions,
) -> Result<NaiveBayesModel> {
    if !(opts.smoothing > 0.0 && opts.smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing must be positive, got {}",
            opts.smoothing
        )));
    }
    let mapped = docs
        .iter()
        .map(|d| {
            label_map
                .get(&d.label)
                .ok_or_else(|| Error::UnmappedLabel(d.label.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let universe_set = UniverseSet::new(label_map.universes())?;
    let k = universe_set.len();
    let targets: Vec<usize> = mapped
        .iter()
        .map(|u| {
            universe_set
                .index_of(u)
                .expect("label map universes form the set")
        })
        .collect();
    let mut doc_counts = vec![0usize; k];
    for &t in &targets {
        doc_counts[t] += 1;
    }
    if let Some(empty) = doc_counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyUniverse(universe_set.labels()[empty].clone()));
    }

    let token_docs: Vec<Vec<String>> = docs
        .iter()
        .map(|d| tokenize(&d.text, opts.remove_stopwords))
        .collect();
    let tfidf = build_tfidf(&token_docs)?;
    let v = tfidf.vocab_size();

    let mut mass = vec![vec![0.0f64; v]; k];
    for (tokens, &u) in token_docs.iter().zip(&targets) {
        for (id, w) in tfidf.weights(tokens.iter().map(String::as_str)) {
            mass[u][id] += w;
        }
    }
    let log_likelihood = mass
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum::<f64>() + opts.smoothing * v as f64;
            row.into_iter()
                .map(|m| ((m + opts.smoothing) / total).ln())
                .collect()
        })
        .collect();

    Ok(NaiveBayesModel {
        log_prior: vec![-(k as f64).ln(); k],
        universe_set,
        log_likelihood,
        smoothing: opts.smoothing,
        remove_stopwords: opts.remove_stopwords,
        tfidf,
        doc_counts,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    labels: Vec<String>,
    doc_counts: Vec<usize>,
    log_prior: Vec<f64>,
    smoothing: f64,
    remove_stopwords: bool,
    tfidf_doc_count: usize,
    vocab: Vec<String>,
    idf: Vec<f64>,
    log_likelihood: Vec<Vec<f64>>,
}

impl NaiveBayesModel {
    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    pub fn log_likelihood(&self, universe: usize, token_id: usize) -> f64 {
        self.log_likelihood[universe][token_id]
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn removes_stopwords(&self) -> bool {
        self.remove_stopwords
    }

    pub fn tfidf(&self) -> &TfidfModel {
        &self.tfidf
    }

    /// Training documents per universe, aligned with the universe set.
    pub fn doc_counts(&self) -> &[usize] {
        &self.doc_counts
    }

    /// Sparse TF-IDF features of an utterance under this model's vocabulary.
    pub fn features(&self, utterance: &Utterance) -> Vec<(usize, f64)> {
        self.tfidf
            .weights(utterance.content_tokens(self.remove_stopwords))
    }

    /// Classify a pre-computed sparse feature vector.
    pub fn classify_features(&self, features: &[(usize, f64)]) -> UniverseDistribution {
        let scores: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.log_likelihood)
            .map(|(prior, row)| prior + features.iter().map(|&(id, w)| w * row[id]).sum::<f64>())
            .collect();
        UniverseDistribution::from_log_scores(&scores).floored(PROB_FLOOR)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: MODEL_VERSION,
            labels: self.universe_set.labels().to_vec(),
            doc_counts: self.doc_counts.clone(),
            log_prior: self.log_prior.clone(),
            smoothing: self.smoothing,
            remove_stopwords: self.remove_stopwords,
            tfidf_doc_count: self.tfidf.doc_count(),
            vocab: self.tfidf.tokens().to_vec(),
            idf: (0..self.tfidf.vocab_size())
                .map(|i| self.tfidf.idf(i))
                .collect(),
            log_likelihood: self.log_likelihood.clone(),
        };
        serde_json::to_string(&file).expect("model serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, "model", MODEL_VERSION)?;
        let f: ModelFile = serde_json::from_value(v)?;
        let universe_set = UniverseSet::new(f.labels)?;
        let k = universe_set.len();
        let vsize = f.vocab.len();
        if f.log_prior.len() != k || f.doc_counts.len() != k || f.log_likelihood.len() != k {
            return Err(Error::Parse(
                "per-universe arrays do not match label count".into(),
            ));
        }
        if f.idf.len() != vsize || f.log_likelihood.iter().any(|r| r.len() != vsize) {
            return Err(Error::Parse(
                "per-token arrays do not match vocabulary size".into(),
            ));
        }
        let tfidf = TfidfModel::from_parts(f.vocab, f.idf, f.tfidf_doc_count);
        Ok(NaiveBayesModel {
            universe_set,
            log_prior: f.log_prior,
            log_likelihood: f.log_likelihood,
            smoothing: f.smoothing,
            remove_stopwords: f.remove_stopwords,
            tfidf,
            doc_counts: f.doc_counts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        NaiveBayesModel::from_json(&text)
    }
}

impl UniverseModel for NaiveBayesModel {
    fn universe_set(&self) -> &UniverseSet {
        &self.universe_set
    }

    fn classify(&self, utterance: &Utterance) -> UniverseDistribution {
        self.classify_features(&self.features(utterance))
    }
}

/// Universe model backed by an explicit text → distribution table; unknown
/// text classifies as uniform. Handy for hand-built scenarios.
#[derive(Debug, Clone)]
pub struct TableModel {
    universe_set: UniverseSet,
    table: HashMap<String, UniverseDistribution>,
}

impl TableModel {
    pub fn new(universe_set: UniverseSet) -> Self {
        TableModel {
            universe_set,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, text: impl AsRef<str>, z: UniverseDistribution) -> Result<()> {
        if z.len() != self.universe_set.len() {
            return Err(Error::InvalidDistribution(format!(
                "length {} for {} universes",
                z.len(),
                self.universe_set.len()
            )));
        }
        let key = Utterance::new(text)?.text().to_owned();
        self.table.insert(key, z.floored(PROB_FLOOR));
        Ok(())
    }
}

impl UniverseModel for TableModel {
    fn universe_set(&self) -> &UniverseSet {
        &self.universe_set
    }

    fn classify(&self, utterance: &Utterance) -> UniverseDistribution {
        self.table
            .get(utterance.text())
            .cloned()
            .unwrap_or_else(|| UniverseDistribution::uniform(self.universe_set.len()))
    }
}
