//! Semantics-preserving obfuscation of training text and robustness
//! auditing of membership-inference attacks.
//!
//! Every model interaction sits behind a trait ([`metrics::FeatureProvider`],
//! [`paraphrase::Paraphraser`], [`redaction::Tagger`]) or a record format
//! ([`scoring::TokenScoreRecord`]), so the whole pipeline runs offline from
//! files and against HTTP services alike.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod http;
pub mod jsonl;
pub mod metrics;
pub mod paraphrase;
pub mod pipeline;
pub mod protocol;
pub mod redaction;
pub mod retry;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `text`; the key for file-backed features.
pub fn text_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
