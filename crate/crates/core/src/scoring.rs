//! Membership-inference attack statistics over token log-probabilities.
//!
//! Convention: a larger score is stronger evidence of membership. Means are
//! taken over tokens summed in ascending order, so every single-record
//! statistic is bit-identical under any permutation of the token list.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledCorpus};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::word_token_seq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Lowercase,
    PrefixedNonmember,
    PrefixedMember,
    ReferenceModel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Original,
        Variant::Lowercase,
        Variant::PrefixedNonmember,
        Variant::PrefixedMember,
        Variant::ReferenceModel,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl TokenScore {
    pub fn plain(logprob: f64) -> Self {
        Self {
            logprob,
            mu: None,
            sigma: None,
        }
    }

    pub fn with_moments(logprob: f64, mu: f64, sigma: f64) -> Self {
        Self {
            logprob,
            mu: Some(mu),
            sigma: Some(sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreRecord {
    pub id: String,
    pub variant: Variant,
    pub tokens: Vec<TokenScore>,
    pub text_bytes: usize,
}

impl TokenScoreRecord {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid(format!("record {:?} has no tokens", self.id)));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if !(t.logprob.is_finite() && t.logprob <= 0.0) {
                return Err(Error::invalid(format!(
                    "record {:?} token {i}: logprob {} not finite and <= 0",
                    self.id, t.logprob
                )));
            }
            match (t.mu, t.sigma) {
                (None, None) => {}
                (Some(mu), Some(sigma)) if mu.is_finite() && sigma.is_finite() && sigma > 0.0 => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "record {:?} token {i}: mu and sigma must both be present with sigma > 0",
                        self.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn has_moments(&self) -> bool {
        self.tokens.iter().all(|t| t.mu.is_some() && t.sigma.is_some())
    }
}

pub fn load_records(path: &Path) -> Result<Vec<TokenScoreRecord>> {
    let records: Vec<TokenScoreRecord> = jsonl::read(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Loss,
    Zlib,
    Lowercase,
    MinK,
    MinKPp,
    Recall,
    ConRecall,
    Ratio,
    BagOfWords,
}

impl AttackKind {
    pub const ALL: [AttackKind; 9] = [
        AttackKind::Loss,
        AttackKind::Zlib,
        AttackKind::Lowercase,
        AttackKind::MinK,
        AttackKind::MinKPp,
        AttackKind::Recall,
        AttackKind::ConRecall,
        AttackKind::Ratio,
        AttackKind::BagOfWords,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            AttackKind::Loss => "Loss",
            AttackKind::Zlib => "Zlib",
            AttackKind::Lowercase => "Lowercase",
            AttackKind::MinK => "Min-K%",
            AttackKind::MinKPp => "Min-K%++",
            AttackKind::Recall => "ReCall",
            AttackKind::ConRecall => "CON-ReCall",
            AttackKind::Ratio => "Ratio",
            AttackKind::BagOfWords => "Bag-of-Words",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            AttackKind::Loss => "loss",
            AttackKind::Zlib => "zlib",
            AttackKind::Lowercase => "lowercase",
            AttackKind::MinK => "min_k",
            AttackKind::MinKPp => "min_k_pp",
            AttackKind::Recall => "recall",
            AttackKind::ConRecall => "con_recall",
            AttackKind::Ratio => "ratio",
            AttackKind::BagOfWords => "bag_of_words",
        }
    }

    /// Whether the attack reads target-model token scores.
    pub fn is_model_based(self) -> bool {
        self != AttackKind::BagOfWords
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|a| a.id() == s || a.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub id: String,
    pub attack: AttackKind,
    pub score: f64,
}

fn finite(id: &str, attack: AttackKind, score: f64) -> Result<AttackScore> {
    if !score.is_finite() {
        return Err(Error::invalid(format!("{attack} score for {id:?} is not finite")));
    }
    Ok(AttackScore {
        id: id.to_owned(),
        attack,
        score,
    })
}

/// Mean with terms summed in ascending order.
fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn nonempty(rec: &TokenScoreRecord) -> Result<()> {
    if rec.tokens.is_empty() {
        return Err(Error::invalid(format!("record {:?} has no tokens", rec.id)));
    }
    Ok(())
}

fn expect_variant(rec: &TokenScoreRecord, want: Variant) -> Result<()> {
    if rec.variant != want {
        return Err(Error::invalid(format!(
            "record {:?} has variant {:?}, expected {want:?}",
            rec.id, rec.variant
        )));
    }
    Ok(())
}

fn same_id(a: &TokenScoreRecord, b: &TokenScoreRecord) -> Result<()> {
    if a.id != b.id {
        return Err(Error::invalid(format!("record ids differ: {:?} vs {:?}", a.id, b.id)));
    }
    Ok(())
}

pub fn mean_logprob(rec: &TokenScoreRecord) -> Result<f64> {
    nonempty(rec)?;
    Ok(sorted_mean(rec.tokens.iter().map(|t| t.logprob).collect()))
}

/// Mean token log-probability.
pub fn loss_score(rec: &TokenScoreRecord) -> Result<AttackScore> {
    expect_variant(rec, Variant::Original)?;
    finite(&rec.id, AttackKind::Loss, mean_logprob(rec)?)
}

pub const DEFAULT_ZLIB_LEVEL: u32 = 6;

/// Length in bytes of `text` compressed into a zlib stream.
pub fn zlib_len(text: &str, level: u32) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(level));
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// Mean log-probability divided by the zlib-compressed length of the text.
pub fn zlib_score(rec: &TokenScoreRecord, raw_text: &str, level: u32) -> Result<AttackScore> {
    if raw_text.is_empty() {
        return Err(Error::invalid("zlib attack needs nonempty text"));
    }
    if rec.text_bytes != raw_text.len() {
        return Err(Error::invalid(format!(
            "record {:?} scored {} bytes but text has {}",
            rec.id,
            rec.text_bytes,
            raw_text.len()
        )));
    }
    let mean = mean_logprob(rec)?;
    finite(&rec.id, AttackKind::Zlib, mean / zlib_len(raw_text, level) as f64)
}

/// Original mean log-probability minus that of the lowercased text.
pub fn lowercase_score(orig: &TokenScoreRecord, lower: &TokenScoreRecord) -> Result<AttackScore> {
    same_id(orig, lower)?;
    finite(
        &orig.id,
        AttackKind::Lowercase,
        mean_logprob(orig)? - mean_logprob(lower)?,
    )
}

pub const DEFAULT_K_PERCENT: f64 = 20.0;

/// Number of tokens kept for `k_percent` of `n`: floor, at least one.
pub fn k_count(n: usize, k_percent: f64) -> Result<usize> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let k = (k_percent * n as f64 / 100.0).floor() as usize;
    Ok(k.clamp(1, n.max(1)))
}

fn lowest_k_mean(mut values: Vec<f64>, k_percent: f64) -> Result<f64> {
    let k = k_count(values.len(), k_percent)?;
    values.sort_by(f64::total_cmp);
    values.truncate(k);
    Ok(values.iter().sum::<f64>() / k as f64)
}

/// Mean of the lowest `k_percent` token log-probabilities.
pub fn min_k(rec: &TokenScoreRecord, k_percent: f64) -> Result<AttackScore> {
    nonempty(rec)?;
    let v = rec.tokens.iter().map(|t| t.logprob).collect();
    finite(&rec.id, AttackKind::MinK, lowest_k_mean(v, k_percent)?)
}

/// Like [`min_k`] over per-token `(logprob - mu) / sigma`.
pub fn min_k_pp(rec: &TokenScoreRecord, k_percent: f64) -> Result<AttackScore> {
    nonempty(rec)?;
    let normalized = rec
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| match (t.mu, t.sigma) {
            (Some(mu), Some(sigma)) => Ok((t.logprob - mu) / sigma),
            _ => Err(Error::AttackUnavailable(format!(
                "min_k_pp: record {:?} token {i} lacks mu/sigma",
                rec.id
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    finite(&rec.id, AttackKind::MinKPp, lowest_k_mean(normalized, k_percent)?)
}

fn same_suffix(a: &TokenScoreRecord, b: &TokenScoreRecord) -> Result<()> {
    same_id(a, b)?;
    if a.tokens.len() != b.tokens.len() {
        return Err(Error::invalid(format!(
            "record {:?}: {:?} has {} suffix tokens, {:?} has {}",
            a.id,
            a.variant,
            a.tokens.len(),
            b.variant,
            b.tokens.len()
        )));
    }
    Ok(())
}

/// Nonmember-prefixed mean log-probability minus the unconditional one.
pub fn recall_score(cond: &TokenScoreRecord, rec: &TokenScoreRecord) -> Result<AttackScore> {
    same_suffix(cond, rec)?;
    finite(
        &rec.id,
        AttackKind::Recall,
        mean_logprob(cond)? - mean_logprob(rec)?,
    )
}

/// Nonmember-prefixed minus member-prefixed mean log-probability.
pub fn con_recall_score(
    member_prefixed: &TokenScoreRecord,
    nonmember_prefixed: &TokenScoreRecord,
    rec: &TokenScoreRecord,
) -> Result<AttackScore> {
    same_suffix(member_prefixed, rec)?;
    same_suffix(nonmember_prefixed, rec)?;
    finite(
        &rec.id,
        AttackKind::ConRecall,
        mean_logprob(nonmember_prefixed)? - mean_logprob(member_prefixed)?,
    )
}

/// Target-model minus reference-model mean log-probability.
pub fn ratio_score(target: &TokenScoreRecord, reference: &TokenScoreRecord) -> Result<AttackScore> {
    same_id(target, reference)?;
    finite(
        &target.id,
        AttackKind::Ratio,
        mean_logprob(target)? - mean_logprob(reference)?,
    )
}

/// Classifier settings for the Bag-of-Words control attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagOfWordsConfig {
    pub folds: usize,
    pub vocab_size: usize,
    pub l2: f64,
    /// Stop once every gradient component is below this in magnitude.
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BagOfWordsConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            vocab_size: 5000,
            l2: 1e-2,
            tolerance: 1e-5,
            max_iter: 1000,
            seed: 0,
        }
    }
}

/// Most frequent tokens of `docs`, ties broken lexicographically.
fn build_vocab(docs: &[&Vec<String>], size: usize) -> HashMap<String, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        for t in d.iter() {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(size)
        .enumerate()
        .map(|(i, (t, _))| (t.to_owned(), i))
        .collect()
}

fn featurize(tokens: &[String], vocab: &HashMap<String, usize>) -> Vec<usize> {
    let mut f: Vec<usize> = tokens.iter().filter_map(|t| vocab.get(t).copied()).collect();
    f.sort_unstable();
    f.dedup();
    f
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized logistic regression on binary features by full-batch
/// gradient descent with step `1 / L`, `L` the smoothness bound.
/// Returns `(weights, bias)`.
fn train_logistic(rows: &[Vec<usize>], y: &[f64], dim: usize, cfg: &BagOfWordsConfig) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let max_sq = rows.iter().map(|r| r.len() + 1).max().unwrap_or(1) as f64;
    let step = 1.0 / (0.25 * max_sq + cfg.l2);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (r, &yi) in rows.iter().zip(y) {
            let z = b + r.iter().map(|&j| w[j]).sum::<f64>();
            let resid = (sigmoid(z) - yi) / n;
            gb += resid;
            for &j in r {
                grad[j] += resid;
            }
        }
        let mut max_abs = gb.abs();
        for (g, wj) in grad.iter_mut().zip(&w) {
            *g += cfg.l2 * wj;
            max_abs = max_abs.max(g.abs());
        }
        if max_abs < cfg.tolerance {
            break;
        }
        for (wj, g) in w.iter_mut().zip(&grad) {
            *wj -= step * g;
        }
        b -= step * gb;
    }
    (w, b)
}

/// Stratified fold index per example.
fn assign_folds(labels: &[Label], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    for class in [Label::Member, Label::Nonmember] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % folds;
        }
    }
    fold
}

/// Out-of-fold membership probabilities from lexical features alone.
pub fn bag_of_words_scores(corpus: &LabeledCorpus, cfg: &BagOfWordsConfig) -> Result<Vec<AttackScore>> {
    corpus.require_both_labels()?;
    if cfg.folds < 2 {
        return Err(Error::invalid("bag_of_words needs at least 2 folds"));
    }
    let tokens: Vec<Vec<String>> = corpus.examples.iter().map(|e| word_token_seq(&e.text)).collect();
    let labels: Vec<Label> = corpus.examples.iter().map(|e| e.label).collect();
    let fold_of = assign_folds(&labels, cfg.folds, cfg.seed);

    let per_fold: Vec<Vec<(usize, f64)>> = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..tokens.len()).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..tokens.len()).filter(|&i| fold_of[i] == k).collect();
            if test.is_empty() {
                return Vec::new();
            }
            let train_docs: Vec<&Vec<String>> = train.iter().map(|&i| &tokens[i]).collect();
            let vocab = build_vocab(&train_docs, cfg.vocab_size);
            let rows: Vec<Vec<usize>> = train.iter().map(|&i| featurize(&tokens[i], &vocab)).collect();
            let y: Vec<f64> = train
                .iter()
                .map(|&i| if labels[i].is_member() { 1.0 } else { 0.0 })
                .collect();
            let (w, b) = train_logistic(&rows, &y, vocab.len(), cfg);
            test.into_iter()
                .map(|i| {
                    let z = b + featurize(&tokens[i], &vocab).iter().map(|&j| w[j]).sum::<f64>();
                    (i, sigmoid(z))
                })
                .collect()
        })
        .collect();

    let mut scores = vec![f64::NAN; tokens.len()];
    for (i, p) in per_fold.into_iter().flatten() {
        scores[i] = p;
    }
    corpus
        .examples
        .iter()
        .zip(scores)
        .map(|(e, s)| finite(&e.id, AttackKind::BagOfWords, s))
        .collect()
}

/// Per-attack settings. `signs` flips an attack's orientation; missing
/// entries mean `+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub k_percent: f64,
    pub zlib_level: u32,
    pub signs: BTreeMap<AttackKind, f64>,
    pub bag_of_words: BagOfWordsConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            k_percent: DEFAULT_K_PERCENT,
            zlib_level: DEFAULT_ZLIB_LEVEL,
            signs: BTreeMap::new(),
            bag_of_words: BagOfWordsConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn sign(&self, attack: AttackKind) -> f64 {
        self.signs.get(&attack).copied().unwrap_or(1.0)
    }
}

/// Records for one scoring run, indexed by `(id, variant)`.
#[derive(Debug, Default, Clone)]
pub struct RecordSet {
    by_key: HashMap<(String, Variant), TokenScoreRecord>,
}

impl RecordSet {
    pub fn new(records: impl IntoIterator<Item = TokenScoreRecord>) -> Result<Self> {
        let mut by_key = HashMap::new();
        for r in records {
            r.validate()?;
            let key = (r.id.clone(), r.variant);
            if by_key.insert(key, r).is_some() {
                return Err(Error::invalid("duplicate (id, variant) token record"));
            }
        }
        Ok(Self { by_key })
    }

    pub fn get(&self, id: &str, variant: Variant) -> Option<&TokenScoreRecord> {
        self.by_key.get(&(id.to_owned(), variant))
    }

    fn has_variant(&self, variant: Variant) -> bool {
        self.by_key.keys().any(|(_, v)| *v == variant)
    }

    fn all_with_moments(&self, variant: Variant) -> bool {
        self.by_key
            .iter()
            .filter(|((_, v), _)| *v == variant)
            .all(|(_, r)| r.has_moments())
    }
}

/// Scores from all available attacks for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub scores: Vec<AttackScore>,
    /// Attacks that could not run, with the reason.
    pub unavailable: BTreeMap<AttackKind, String>,
}

impl AttackRun {
    pub fn available(&self) -> Vec<AttackKind> {
        AttackKind::ALL
            .into_iter()
            .filter(|a| !self.unavailable.contains_key(a))
            .collect()
    }
}

/// Runs every attack whose inputs are present in `records`.
///
/// An attack is marked unavailable when a variant it needs is absent from
/// the whole run (or, for Min-K%++, when moments are missing); a variant
/// present for some ids but not others is an error.
pub fn run_attacks(corpus: &LabeledCorpus, records: &RecordSet, cfg: &AttackConfig) -> Result<AttackRun> {
    use AttackKind::*;
    let mut unavailable = BTreeMap::new();
    let needs: [(AttackKind, &[Variant]); 8] = [
        (Loss, &[Variant::Original]),
        (Zlib, &[Variant::Original]),
        (Lowercase, &[Variant::Original, Variant::Lowercase]),
        (MinK, &[Variant::Original]),
        (MinKPp, &[Variant::Original]),
        (Recall, &[Variant::Original, Variant::PrefixedNonmember]),
        (ConRecall, &[Variant::Original, Variant::PrefixedNonmember, Variant::PrefixedMember]),
        (Ratio, &[Variant::Original, Variant::ReferenceModel]),
    ];
    for (attack, vars) in needs {
        if let Some(v) = vars.iter().find(|v| !records.has_variant(**v)) {
            unavailable.insert(attack, format!("no {v:?} records"));
        }
    }
    if !unavailable.contains_key(&MinKPp) && !records.all_with_moments(Variant::Original) {
        unavailable.insert(MinKPp, "token records lack mu/sigma".to_owned());
    }

    let mut scores = Vec::new();
    for ex in &corpus.examples {
        let get = |v: Variant| {
            records
                .get(&ex.id, v)
                .ok_or_else(|| Error::invalid(format!("missing {v:?} record for {:?}", ex.id)))
        };
        for attack in AttackKind::ALL {
            if attack == BagOfWords || unavailable.contains_key(&attack) {
                continue;
            }
            let s = match attack {
                Loss => loss_score(get(Variant::Original)?)?,
                Zlib => zlib_score(get(Variant::Original)?, &ex.text, cfg.zlib_level)?,
                Lowercase => lowercase_score(get(Variant::Original)?, get(Variant::Lowercase)?)?,
                MinK => min_k(get(Variant::Original)?, cfg.k_percent)?,
                MinKPp => min_k_pp(get(Variant::Original)?, cfg.k_percent)?,
                Recall => recall_score(get(Variant::PrefixedNonmember)?, get(Variant::Original)?)?,
                ConRecall => con_recall_score(
                    get(Variant::PrefixedMember)?,
                    get(Variant::PrefixedNonmember)?,
                    get(Variant::Original)?,
                )?,
                Ratio => ratio_score(get(Variant::Original)?, get(Variant::ReferenceModel)?)?,
                BagOfWords => unreachable!(),
            };
            scores.push(AttackScore {
                score: s.score * cfg.sign(attack),
                ..s
            });
        }
    }
    for s in bag_of_words_scores(corpus, &cfg.bag_of_words)? {
        scores.push(AttackScore {
            score: s.score * cfg.sign(BagOfWords),
            ..s
        });
    }
    Ok(AttackRun { scores, unavailable })
}

/// Black-box scoring boundary: per-token log-probabilities of `text`,
/// conditioned on `prefix` when given (suffix tokens only).
pub trait TokenScorer: Send + Sync {
    fn score(&self, text: &str, prefix: Option<&str>, want_moments: bool) -> Result<Vec<TokenScore>>;
}

impl<S: TokenScorer + ?Sized> TokenScorer for &S {
    fn score(&self, text: &str, prefix: Option<&str>, want_moments: bool) -> Result<Vec<TokenScore>> {
        (**self).score(text, prefix, want_moments)
    }
}

/// Which variants to request when scoring a text. Absent prefixes or
/// reference scorer leave the dependent attacks unavailable downstream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorePlan {
    pub want_moments: bool,
    pub lowercase: bool,
    pub nonmember_prefix: Option<String>,
    pub member_prefix: Option<String>,
}

/// Scores every planned variant of one text.
pub fn score_variants(
    id: &str,
    text: &str,
    target: &dyn TokenScorer,
    reference: Option<&dyn TokenScorer>,
    plan: &ScorePlan,
) -> Result<Vec<TokenScoreRecord>> {
    let mk = |variant, tokens| {
        let r = TokenScoreRecord {
            id: id.to_owned(),
            variant,
            tokens,
            text_bytes: text.len(),
        };
        r.validate().map(|_| r)
    };
    let mut out = vec![mk(Variant::Original, target.score(text, None, plan.want_moments)?)?];
    if plan.lowercase {
        out.push(mk(Variant::Lowercase, target.score(&text.to_lowercase(), None, false)?)?);
    }
    if let Some(p) = &plan.nonmember_prefix {
        out.push(mk(Variant::PrefixedNonmember, target.score(text, Some(p), false)?)?);
    }
    if let Some(p) = &plan.member_prefix {
        out.push(mk(Variant::PrefixedMember, target.score(text, Some(p), false)?)?);
    }
    if let Some(r) = reference {
        out.push(mk(Variant::ReferenceModel, r.score(text, None, false)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;

    fn rec(id: &str, variant: Variant, lps: &[f64]) -> TokenScoreRecord {
        TokenScoreRecord {
            id: id.into(),
            variant,
            tokens: lps.iter().map(|&l| TokenScore::plain(l)).collect(),
            text_bytes: 10,
        }
    }

    #[test]
    fn loss_cases() {
        assert_eq!(loss_score(&rec("a", Variant::Original, &[-1.0, -2.0, -3.0])).unwrap().score, -2.0);
        assert_eq!(loss_score(&rec("a", Variant::Original, &[-0.5])).unwrap().score, -0.5);
        assert!(loss_score(&rec("a", Variant::Original, &[])).is_err());
        assert!(loss_score(&rec("a", Variant::Lowercase, &[-1.0])).is_err());
    }

    #[test]
    fn zlib_division_and_determinism() {
        let text = "the quick brown fox jumps over the lazy dog";
        let c = zlib_len(text, 6);
        assert_eq!(c, zlib_len(text, 6));
        let mut r = rec("a", Variant::Original, &[-1.0, -3.0]);
        r.text_bytes = text.len();
        let s = zlib_score(&r, text, 6).unwrap().score;
        assert_eq!(s, -2.0 / c as f64);
        assert!(zlib_score(&r, "", 6).is_err());
    }

    #[test]
    fn zlib_normalization_arithmetic() {
        // mean -2.0 over a 50-byte compressed length
        assert_eq!(-2.0 / 50.0, -0.04);
    }

    #[test]
    fn lowercase_cases() {
        let o = rec("a", Variant::Original, &[-2.0]);
        let l = rec("a", Variant::Lowercase, &[-3.0]);
        assert_eq!(lowercase_score(&o, &l).unwrap().score, 1.0);
        assert_eq!(lowercase_score(&o, &o).unwrap().score, 0.0);
        assert!(lowercase_score(&o, &rec("b", Variant::Lowercase, &[-3.0])).is_err());
    }

    #[test]
    fn min_k_cases() {
        let r = rec("a", Variant::Original, &[-0.5, -1.0, -3.0, -4.0, -0.2]);
        assert_eq!(min_k(&r, 40.0).unwrap().score, -3.5);
        assert_eq!(min_k(&r, 100.0).unwrap().score, loss_score(&r).unwrap().score);
        let one = rec("a", Variant::Original, &[-7.25]);
        for k in [0.1, 20.0, 100.0] {
            assert_eq!(min_k(&one, k).unwrap().score, -7.25);
        }
        assert!(min_k(&r, 0.0).is_err());
        assert!(min_k(&r, 100.5).is_err());
    }

    #[test]
    fn min_k_pp_cases() {
        let mut r = rec("a", Variant::Original, &[-2.0]);
        r.tokens[0] = TokenScore::with_moments(-2.0, -2.0, 1.0);
        assert_eq!(min_k_pp(&r, 20.0).unwrap().score, 0.0);

        let r = TokenScoreRecord {
            tokens: vec![
                TokenScore::with_moments(-2.0, -1.0, 1.0),
                TokenScore::with_moments(-1.0, -2.0, 1.0),
                TokenScore::with_moments(-4.0, -1.0, 1.0),
            ],
            ..rec("a", Variant::Original, &[])
        };
        assert_eq!(min_k_pp(&r, 34.0).unwrap().score, -3.0);

        let plain = rec("a", Variant::Original, &[-1.0]);
        assert!(matches!(min_k_pp(&plain, 20.0), Err(Error::AttackUnavailable(_))));
    }

    #[test]
    fn recall_cases() {
        let o = rec("a", Variant::Original, &[-2.0, -2.0]);
        let c = rec("a", Variant::PrefixedNonmember, &[-1.8, -1.8]);
        assert!((recall_score(&c, &o).unwrap().score - 0.2).abs() < 1e-12);
        assert_eq!(recall_score(&o, &o).unwrap().score, 0.0);
        let short = rec("a", Variant::PrefixedNonmember, &[-1.8]);
        assert!(recall_score(&short, &o).is_err());
    }

    #[test]
    fn con_recall_cases() {
        let o = rec("a", Variant::Original, &[-2.0]);
        let m = rec("a", Variant::PrefixedMember, &[-1.5]);
        let nm = rec("a", Variant::PrefixedNonmember, &[-2.5]);
        assert_eq!(con_recall_score(&m, &nm, &o).unwrap().score, -1.0);
        assert_eq!(con_recall_score(&nm, &nm, &o).unwrap().score, 0.0);
    }

    #[test]
    fn ratio_cases() {
        let t = rec("a", Variant::Original, &[-1.0]);
        let r = rec("a", Variant::ReferenceModel, &[-2.0]);
        assert_eq!(ratio_score(&t, &r).unwrap().score, 1.0);
        assert_eq!(ratio_score(&t, &t).unwrap().score, 0.0);
        assert!(ratio_score(&t, &rec("b", Variant::ReferenceModel, &[-2.0])).is_err());
    }

    #[test]
    fn record_validation() {
        let mut r = rec("a", Variant::Original, &[0.5]);
        assert!(r.validate().is_err());
        r.tokens = vec![TokenScore {
            logprob: -1.0,
            mu: Some(0.0),
            sigma: None,
        }];
        assert!(r.validate().is_err());
        r.tokens = vec![TokenScore::with_moments(-1.0, -1.0, 0.0)];
        assert!(r.validate().is_err());
    }

    #[test]
    fn k_count_rule() {
        assert_eq!(k_count(5, 40.0).unwrap(), 2);
        assert_eq!(k_count(3, 34.0).unwrap(), 1);
        assert_eq!(k_count(10, 20.0).unwrap(), 2);
        assert_eq!(k_count(4, 20.0).unwrap(), 1);
        assert_eq!(k_count(7, 100.0).unwrap(), 7);
    }

    #[test]
    fn bag_of_words_rejects_single_label() {
        let c = LabeledCorpus::new(vec![
            Example { id: "a".into(), text: "x y".into(), label: Label::Member },
            Example { id: "b".into(), text: "x z".into(), label: Label::Member },
        ])
        .unwrap();
        assert!(matches!(
            bag_of_words_scores(&c, &BagOfWordsConfig::default()),
            Err(Error::SingleLabel)
        ));
    }

    #[test]
    fn stratified_folds_balance_labels() {
        let labels: Vec<Label> = (0..20)
            .map(|i| if i % 2 == 0 { Label::Member } else { Label::Nonmember })
            .collect();
        let f = assign_folds(&labels, 5, 0);
        for k in 0..5 {
            let m = (0..20).filter(|&i| f[i] == k && labels[i].is_member()).count();
            assert_eq!(m, 2);
        }
        assert_eq!(f, assign_folds(&labels, 5, 0));
    }

    #[test]
    fn attack_names_parse() {
        for a in AttackKind::ALL {
            assert_eq!(a.id().parse::<AttackKind>().unwrap(), a);
            assert_eq!(a.display_name().parse::<AttackKind>().unwrap(), a);
        }
    }
}
