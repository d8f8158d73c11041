//! Seeded synthetic corpora with known topic structure, for experiments and
//! tests that need ground truth about which lines reveal a universe.
//!
//! Words are three consonant-vowel syllables derived from an integer id, so
//! every vocabulary is disjoint by construction. Filler and entity words never
//! appear in training documents and are therefore invisible to a trained
//! universe model; only topic words carry universe evidence.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, LabeledDocument, Utterance};
use crate::error::Result;
use crate::universe::LabelMap;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable word for `id`; distinct ids give distinct words.
pub fn word(id: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut s = String::with_capacity(6);
    let mut x = id;
    for _ in 0..3 {
        let syl = x % n;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
        x /= n;
    }
    if x > 0 {
        s.push_str(&x.to_string());
    }
    s
}

pub fn universe_label(u: usize) -> String {
    format!("topic{u}")
}

/// Disjoint word-id blocks.
struct Vocab {
    universes: usize,
    topic: usize,
    filler: usize,
}

impl Vocab {
    fn filler(&self, i: usize) -> String {
        word(i)
    }
    fn topic(&self, u: usize, i: usize) -> String {
        word(self.filler + u * self.topic + i)
    }
    fn entity(&self, file: usize, i: usize, per_file: usize) -> String {
        word(self.filler + self.universes * self.topic + file * per_file + i)
    }
}

/// Knobs for [`topic_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicCorpusConfig {
    pub universes: usize,
    pub topic_words: usize,
    pub filler_words: usize,
    pub entity_words_per_file: usize,
    pub train_docs_per_universe: usize,
    pub train_doc_len: usize,
    /// Probability a training token is a topic word of a random universe.
    pub train_leak: f64,
    pub min_line_len: usize,
    pub max_line_len: usize,
    /// Each line draws its topic-word rate as `max_topic_rate * U^topic_rate_skew`
    /// with `U ~ Uniform(0, 1)`; larger skew means mostly weak lines and a few strong ones.
    pub max_topic_rate: f64,
    pub topic_rate_skew: f64,
    /// Rate of topic words from a uniformly random universe, applied before
    /// the line's own topic.
    pub stray_topic_rate: f64,
    /// Rate of file-specific entity words among non-topic tokens.
    pub entity_rate: f64,
    pub files: usize,
    pub lines_per_file: usize,
}

impl Default for TopicCorpusConfig {
    fn default() -> Self {
        TopicCorpusConfig {
            universes: 5,
            topic_words: 16,
            filler_words: 16,
            entity_words_per_file: 2,
            train_docs_per_universe: 40,
            train_doc_len: 800,
            train_leak: 0.1,
            min_line_len: 12,
            max_line_len: 38,
            max_topic_rate: 0.11,
            topic_rate_skew: 3.4,
            stray_topic_rate: 0.0,
            entity_rate: 0.08,
            files: 1000,
            lines_per_file: 6,
        }
    }
}

/// Output of [`topic_corpus`].
#[derive(Debug, Clone)]
pub struct TopicCorpus {
    pub training: Vec<LabeledDocument>,
    pub label_map: LabelMap,
    pub files: Vec<Dialogue>,
    /// Universe index of each file.
    pub file_topics: Vec<usize>,
}

/// Dialogue files that each stay on one topic, plus a labeled training corpus
/// for the universe model. Files are assigned topics uniformly, so a random
/// line from another file is off-topic with probability `(k - 1) / k`.
pub fn topic_corpus(cfg: &TopicCorpusConfig, seed: u64) -> Result<TopicCorpus> {
    let v = Vocab {
        universes: cfg.universes,
        topic: cfg.topic_words,
        filler: cfg.filler_words,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut training = Vec::new();
    for u in 0..cfg.universes {
        for _ in 0..cfg.train_docs_per_universe {
            let doc: Vec<String> = (0..cfg.train_doc_len)
                .map(|_| {
                    let src = if rng.random::<f64>() < cfg.train_leak {
                        rng.random_range(0..cfg.universes)
                    } else {
                        u
                    };
                    v.topic(src, rng.random_range(0..cfg.topic_words))
                })
                .collect();
            training.push(LabeledDocument::new(universe_label(u), doc.join(" ")));
        }
    }
    let label_map = LabelMap::identity(&training);

    let mut files = Vec::with_capacity(cfg.files);
    let mut file_topics = Vec::with_capacity(cfg.files);
    for f in 0..cfg.files {
        let u = rng.random_range(0..cfg.universes);
        let mut lines = Vec::with_capacity(cfg.lines_per_file);
        for _ in 0..cfg.lines_per_file {
            let len = rng.random_range(cfg.min_line_len..=cfg.max_line_len);
            let rate = cfg.max_topic_rate * rng.random::<f64>().powf(cfg.topic_rate_skew);
            let toks: Vec<String> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < cfg.stray_topic_rate {
                        v.topic(
                            rng.random_range(0..cfg.universes),
                            rng.random_range(0..cfg.topic_words),
                        )
                    } else if rng.random::<f64>() < rate {
                        v.topic(u, rng.random_range(0..cfg.topic_words))
                    } else if cfg.entity_words_per_file > 0 && rng.random::<f64>() < cfg.entity_rate
                    {
                        v.entity(
                            f,
                            rng.random_range(0..cfg.entity_words_per_file),
                            cfg.entity_words_per_file,
                        )
                    } else {
                        v.filler(rng.random_range(0..cfg.filler_words))
                    }
                })
                .collect();
            lines.push(Utterance::new(toks.join(" "))?);
        }
        files.push(Dialogue::new(lines, None)?);
        file_topics.push(u);
    }
    Ok(TopicCorpus {
        training,
        label_map,
        files,
        file_topics,
    })
}

/// Output of [`reveal_conceal_pool`].
#[derive(Debug, Clone)]
pub struct RevealConcealPool {
    pub training: Vec<LabeledDocument>,
    pub label_map: LabelMap,
    /// Strongly topical lines, half toward each universe.
    pub revealing: Vec<Utterance>,
    /// Lines with a single weak topic word, half toward each universe.
    pub concealing: Vec<Utterance>,
    /// Filler-only lines the universe model cannot read.
    pub neutral: Vec<Utterance>,
}

impl RevealConcealPool {
    pub fn pool(&self) -> Vec<Utterance> {
        self.revealing
            .iter()
            .chain(&self.concealing)
            .chain(&self.neutral)
            .cloned()
            .collect()
    }
}

/// A two-universe pool of `n_reveal` revealing, `n_conceal` concealing and
/// `n_neutral` neutral lines with a matching training corpus.
pub fn reveal_conceal_pool(
    n_reveal: usize,
    n_conceal: usize,
    n_neutral: usize,
    seed: u64,
) -> Result<RevealConcealPool> {
    const TOPIC: usize = 40;
    const FILLER: usize = 60;
    let v = Vocab {
        universes: 2,
        topic: TOPIC,
        filler: FILLER,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut training = Vec::new();
    for u in 0..2 {
        for _ in 0..30 {
            let doc: Vec<String> = (0..30)
                .map(|_| {
                    let src = if rng.random::<f64>() < 0.2 { 1 - u } else { u };
                    v.topic(src, rng.random_range(0..TOPIC))
                })
                .collect();
            training.push(LabeledDocument::new(universe_label(u), doc.join(" ")));
        }
    }
    let label_map = LabelMap::identity(&training);
    let filler_ids: Vec<usize> = (0..FILLER).collect();
    let filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n)
            .map(|_| v.filler(*filler_ids.choose(rng).expect("non-empty")))
            .collect()
    };
    let make =
        |rng: &mut ChaCha8Rng, topic_tokens: usize, u: usize, fill: usize| -> Result<Utterance> {
            let mut toks = filler(rng, fill);
            for _ in 0..topic_tokens {
                let at = rng.random_range(0..=toks.len());
                toks.insert(at, v.topic(u, rng.random_range(0..TOPIC)));
            }
            Utterance::new(toks.join(" "))
        };
    let revealing = (0..n_reveal)
        .map(|i| make(&mut rng, 5, i % 2, 2))
        .collect::<Result<Vec<_>>>()?;
    let concealing = (0..n_conceal)
        .map(|i| make(&mut rng, 1, i % 2, 6))
        .collect::<Result<Vec<_>>>()?;
    let neutral = (0..n_neutral)
        .map(|_| make(&mut rng, 0, 0, 7))
        .collect::<Result<Vec<_>>>()?;
    Ok(RevealConcealPool {
        training,
        label_map,
        revealing,
        concealing,
        neutral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::universe::{train, UniverseModel, DEFAULT_SMOOTHING};
    use std::collections::HashSet;

    #[test]
    fn words_are_distinct() {
        let ws: HashSet<String> = (0..100_000).map(word).collect();
        assert_eq!(ws.len(), 100_000);
        assert_eq!(word(0), "bababa");
    }

    #[test]
    fn topic_corpus_shape() {
        let cfg = TopicCorpusConfig {
            files: 50,
            ..Default::default()
        };
        let c = topic_corpus(&cfg, 1).unwrap();
        assert_eq!(c.files.len(), 50);
        assert!(c.files.iter().all(|f| f.len() == 6));
        assert_eq!(c.training.len(), 5 * cfg.train_docs_per_universe);
        assert_eq!(c.label_map.universes().len(), 5);
        let again = topic_corpus(&cfg, 1).unwrap();
        assert_eq!(again.files, c.files);
    }

    #[test]
    fn pool_lines_behave_as_labeled() {
        let p = reveal_conceal_pool(10, 10, 10, 2).unwrap();
        assert_eq!(p.pool().len(), 30);
        let m = train(&p.training, &p.label_map, DEFAULT_SMOOTHING).unwrap();
        for n in &p.neutral {
            assert!(m.classify(n).is_uniform());
        }
        for (i, r) in p.revealing.iter().enumerate() {
            let z = m.classify(r);
            assert_eq!(z.argmax(), i % 2);
            assert!(z.probs()[i % 2] > 0.95);
        }
        for (i, c) in p.concealing.iter().enumerate() {
            assert_eq!(m.classify(c).argmax(), i % 2);
        }
    }
}
