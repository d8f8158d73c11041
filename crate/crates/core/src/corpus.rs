//! Text ingestion: tokenization, utterance pools, scripts, labeled corpora and
//! TF-IDF weighting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

/// Default minimum line length for utterance pools.
pub const DEFAULT_MIN_CHARS: usize = 10;

const STOPWORDS_RAW: &str = include_str!("../data/stopwords_en.txt");

/// SHA-256 of `data/stopwords_en.txt`, pinned so the list cannot drift silently.
pub const STOPWORDS_SHA256: &str =
    "4e22be0ad71ae1c41dd7a8f944e851ead671d114edf4faad1ee8c698d2ba5084";

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_RAW
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

/// The shipped English stop-word list, one word per line.
pub fn stopword_list() -> &'static str {
    STOPWORDS_RAW
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Lowercase, split on Unicode word boundaries and strip ASCII punctuation
/// from token edges. Stop-words are dropped only when asked.
pub fn tokenize(text: &str, remove_stopwords: bool) -> Vec<String> {
    text.to_lowercase()
        .unicode_words()
        .filter_map(|w| {
            let t = w.trim_matches(|c: char| c.is_ascii_punctuation());
            (!t.is_empty()).then_some(t)
        })
        .filter(|t| !remove_stopwords || !is_stopword(t))
        .map(str::to_owned)
        .collect()
}

/// A single line of dialogue with its tokens cached.
///
/// Tokens are the plain (stop-words kept) tokenization; consumers that want
/// stop-words removed filter with [`is_stopword`].
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Utterance {
    text: String,
    tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: impl AsRef<str>) -> Result<Self> {
        let text = text.as_ref().trim();
        if text.is_empty() {
            return Err(Error::InvalidArgument("utterance text is empty".into()));
        }
        Ok(Utterance {
            tokens: tokenize(text, false),
            text: text.to_owned(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens with stop-words filtered according to `remove_stopwords`.
    pub fn content_tokens(&self, remove_stopwords: bool) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(move |t| !remove_stopwords || !is_stopword(t))
    }
}

impl fmt::Debug for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Utterance({:?})", self.text)
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl TryFrom<String> for Utterance {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Utterance::new(s)
    }
}

impl From<Utterance> for String {
    fn from(u: Utterance) -> String {
        u.text
    }
}

/// An ordered sequence of utterances, optionally speaker-tagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    utterances: Vec<Utterance>,
    speakers: Option<Vec<String>>,
}

impl Dialogue {
    pub fn new(utterances: Vec<Utterance>, speakers: Option<Vec<String>>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::InvalidArgument(
                "dialogue must contain at least one utterance".into(),
            ));
        }
        if let Some(s) = &speakers {
            if s.len() != utterances.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} speakers for {} utterances",
                    s.len(),
                    utterances.len()
                )));
            }
        }
        Ok(Dialogue {
            utterances,
            speakers,
        })
    }

    /// Build from plain strings; blank lines are rejected.
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let utterances = lines
            .iter()
            .map(Utterance::new)
            .collect::<Result<Vec<_>>>()?;
        Dialogue::new(utterances, None)
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn speakers(&self) -> Option<&[String]> {
        self.speakers.as_deref()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A training document tagged with its raw label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDocument {
    pub label: String,
    pub text: String,
}

impl LabeledDocument {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        LabeledDocument {
            label: label.into(),
            text: text.into(),
        }
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Decode {
        path: path.to_owned(),
        offset: e.utf8_error().valid_up_to(),
    })
}

fn lines_of(text: &str) -> impl Iterator<Item = &str> {
    text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l))
}

/// Load a one-utterance-per-line pool, dropping blank lines, lines shorter
/// than `min_chars` (counted in characters after trimming) and, when
/// `dedupe` is set, repeats of an earlier line. Survivors keep file order.
pub fn load_utterance_pool(
    path: impl AsRef<Path>,
    min_chars: usize,
    dedupe: bool,
) -> Result<Vec<Utterance>> {
    let text = read_utf8(path.as_ref())?;
    filter_pool_lines(lines_of(&text), min_chars, dedupe)
}

/// The filtering half of [`load_utterance_pool`], for in-memory lines.
pub fn filter_pool_lines<'a, I>(lines: I, min_chars: usize, dedupe: bool) -> Result<Vec<Utterance>>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.chars().count() < min_chars {
            continue;
        }
        if dedupe && !seen.insert(line.to_owned()) {
            continue;
        }
        out.push(Utterance::new(line)?);
    }
    Ok(out)
}

/// Split `SPEAKER: text` into its parts. A speaker is an upper-case name
/// (letters, digits, spaces, `.`, `'`, `-`) starting with a letter.
fn split_speaker(line: &str) -> Option<(&str, &str)> {
    let (head, rest) = line.split_once(':')?;
    let rest = rest.strip_prefix(' ')?.trim();
    let head = head.trim();
    let mut chars = head.chars();
    let first = chars.next()?;
    if !first.is_alphabetic() || head.chars().count() > 40 || rest.is_empty() {
        return None;
    }
    let ok = head.chars().all(|c| {
        (c.is_alphabetic() && !c.is_lowercase())
            || c.is_ascii_digit()
            || matches!(c, ' ' | '.' | '\'' | '-')
    });
    ok.then_some((head, rest))
}

/// Parse a script from text. Speakers are kept only when every line carries
/// a `SPEAKER: ` prefix; otherwise every line is taken verbatim.
pub fn parse_script(text: &str) -> Option<Dialogue> {
    let lines: Vec<&str> = lines_of(text)
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return None;
    }
    let split: Option<Vec<(&str, &str)>> = lines.iter().map(|l| split_speaker(l)).collect();
    let dialogue = match split {
        Some(pairs) => {
            let speakers = pairs.iter().map(|(s, _)| s.to_string()).collect();
            let utts = pairs
                .iter()
                .map(|(_, t)| Utterance::new(t))
                .collect::<Result<Vec<_>>>()
                .ok()?;
            Dialogue::new(utts, Some(speakers))
        }
        None => Dialogue::from_lines(&lines),
    };
    dialogue.ok()
}

pub fn load_script(path: impl AsRef<Path>) -> Result<Dialogue> {
    let path = path.as_ref();
    let text = read_utf8(path)?;
    parse_script(&text).ok_or_else(|| Error::EmptyScript(path.to_owned()))
}

/// Load a labeled corpus from either a `<root>/<label>/<doc>.txt` tree or a
/// single `label<TAB>text` TSV file. Directory entries are visited in sorted
/// order so loading is deterministic.
pub fn load_labeled_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledDocument>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut docs = Vec::new();
        for label_dir in sorted_entries(path)? {
            if !label_dir.is_dir() {
                continue;
            }
            let label = label_dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| {
                    Error::Parse(format!("non UTF-8 label directory {}", label_dir.display()))
                })?
                .to_owned();
            for doc in sorted_entries(&label_dir)? {
                if doc.is_file() && doc.extension().is_some_and(|e| e == "txt") {
                    docs.push(LabeledDocument::new(label.clone(), read_utf8(&doc)?));
                }
            }
        }
        Ok(docs)
    } else {
        let text = read_utf8(path)?;
        parse_labeled_tsv(&text)
    }
}

pub fn parse_labeled_tsv(text: &str) -> Result<Vec<LabeledDocument>> {
    let mut docs = Vec::new();
    for (n, line) in lines_of(text).enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `label<TAB>text`", n + 1)))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::Parse(format!("line {}: empty label", n + 1)));
        }
        docs.push(LabeledDocument::new(label, body));
    }
    Ok(docs)
}

/// Load every `*.txt` file under `dir` (sorted by name) as a dialogue.
/// Files that parse to nothing are skipped.
pub fn load_dialogue_dir(dir: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for path in sorted_entries(dir.as_ref())? {
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            if let Some(d) = parse_script(&read_utf8(&path)?) {
                out.push(d);
            }
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort();
    Ok(entries)
}

pub const TFIDF_VERSION: u32 = 1;

/// Inverse document frequencies over a fixed vocabulary.
///
/// Token ids are dense and assigned in lexicographic token order, which makes
/// the model (and anything serialized from it) independent of input order.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    tokens: Vec<String>,
    idf: Vec<f64>,
    index: HashMap<String, usize>,
    doc_count: usize,
}

/// Raw-count × idf, ln(N/df) with no smoothing.
pub fn build_tfidf<D, T>(docs: &[D]) -> Result<TfidfModel>
where
    D: AsRef<[T]>,
    T: AsRef<str>,
{
    if docs.is_empty() {
        return Err(Error::NoDocuments);
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let uniq: BTreeSet<&str> = doc.as_ref().iter().map(AsRef::as_ref).collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let (tokens, idf): (Vec<String>, Vec<f64>) = df
        .into_iter()
        .map(|(t, d)| (t.to_owned(), (n / d as f64).ln()))
        .unzip();
    Ok(TfidfModel::from_parts(tokens, idf, docs.len()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TfidfFile {
    version: u32,
    doc_count: usize,
    entries: Vec<TfidfEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TfidfEntry {
    token: String,
    idf: f64,
}

impl TfidfModel {
    pub(crate) fn from_parts(tokens: Vec<String>, idf: Vec<f64>, doc_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TfidfModel {
            tokens,
            idf,
            index,
            doc_count,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn idf(&self, id: usize) -> f64 {
        self.idf[id]
    }

    pub fn idf_of(&self, token: &str) -> Option<f64> {
        self.token_id(token).map(|id| self.idf[id])
    }

    /// Sparse TF-IDF vector of `tokens`, sorted by id. Unknown tokens and
    /// zero-weight entries are dropped.
    pub fn weights<'a, I>(&self, tokens: I) -> Vec<(usize, f64)>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        for t in tokens {
            if let Some(id) = self.token_id(t) {
                *counts.entry(id).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .map(|(id, c)| (id, f64::from(c) * self.idf[id]))
            .filter(|&(_, w)| w > 0.0)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = TfidfFile {
            version: TFIDF_VERSION,
            doc_count: self.doc_count,
            entries: self
                .tokens
                .iter()
                .zip(&self.idf)
                .map(|(t, &idf)| TfidfEntry {
                    token: t.clone(),
                    idf,
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("tfidf serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, "tfidf", TFIDF_VERSION)?;
        let file: TfidfFile = serde_json::from_value(v)?;
        let mut tokens = Vec::with_capacity(file.entries.len());
        let mut idf = Vec::with_capacity(file.entries.len());
        for e in file.entries {
            if !(e.idf >= 0.0) {
                return Err(Error::Parse(format!("negative idf for `{}`", e.token)));
            }
            tokens.push(e.token);
            idf.push(e.idf);
        }
        let model = TfidfModel::from_parts(tokens, idf, file.doc_count);
        if model.index.len() != model.tokens.len() {
            return Err(Error::Parse("duplicate tokens in tfidf vocabulary".into()));
        }
        Ok(model)
    }
}

/// Reject a JSON document whose `version` field is missing or unexpected.
pub(crate) fn check_version(
    v: &serde_json::Value,
    kind: &'static str,
    expected: u32,
) -> Result<()> {
    let found = v
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse(format!("{kind}: missing `version` field")))?;
    if found != u64::from(expected) {
        return Err(Error::Version {
            kind,
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected,
        });
    }
    Ok(())
}
