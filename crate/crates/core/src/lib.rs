//! Narrative-arc shaping for dialogue.
//!
//! A dialogue is read one utterance at a time while a posterior belief over a
//! fixed set of latent "universes" (topics, genres) is updated from a text
//! classifier. The per-step change in belief entropy scores how much a line
//! reveals or conceals, and that score re-weights a base conversation model to
//! steer generation or to rank candidate next lines.
//!
//! * [`corpus`]: tokenization, corpus loading, TF-IDF.
//! * [`universe`]: naive Bayes universe model and distributions.
//! * [`arc`]: belief updates, entropy, scores and narrative arcs.
//! * [`conversation`]: random and retrieval conversation models, perplexity scorers.
//! * [`shaping`]: modulated greedy and rejection-sampled generation.
//! * [`harness`]: next-line prediction benchmark.
//! * [`synth`]: seeded synthetic corpora with known topic structure.

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arc;
pub mod conversation;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod par;
pub mod shaping;
pub mod stats;
pub mod synth;
pub mod universe;

pub use error::{Error, Result};
pub use par::Exec;
