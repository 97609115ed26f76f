//! Metric-gated paraphrase selection.
//!
//! Each attempt asks an external paraphraser for a full sectioned rewrite of
//! the source document. Narrative sections are compared pairwise with the
//! source: semantic persistence through the feature provider, surface
//! overlap through [`word_sim`]. The first attempt meeting both thresholds
//! is returned; otherwise the attempt with the highest
//! `sps - wordsim` wins.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{narrative_spans, parse_sectioned_document, Document, SectionKind};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::{span_cosines, word_sim, FeatureProvider, MetricPair};
use crate::retry::RetryPolicy;

pub const DEFAULT_BASE_PROMPT: &str = "\
You rewrite documents given as <section type=\"structure\"> and <section type=\"narrative\"> blocks.
Copy every structure section exactly, byte for byte.
Rewrite every narrative section so that it keeps its meaning and facts but uses different words and sentence structure.
Return the full document with the same sections in the same order and nothing else.";

/// Marks where feedback starts in a prompt built by [`update_prompt`].
pub const FEEDBACK_MARKER: &str = "\n\n### Feedback on the previous attempt\n";
pub const RAISE_FIDELITY: &str =
    "- The rewrite drifted from the original meaning. Stay closer to the content of each narrative section.";
pub const REDUCE_OVERLAP: &str =
    "- The rewrite reused too much of the original wording. Change vocabulary and sentence structure more.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParaphraseConfig {
    pub max_attempts: usize,
    pub tau_sps: f64,
    pub tau_ov: f64,
    pub base_prompt: String,
    pub retry: RetryPolicy,
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            tau_sps: 0.60,
            tau_ov: 0.35,
            base_prompt: DEFAULT_BASE_PROMPT.to_owned(),
            retry: RetryPolicy::default(),
        }
    }
}

impl ParaphraseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        for (name, v) in [("tau_sps", self.tau_sps), ("tau_ov", self.tau_ov)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, m: &MetricPair) -> bool {
        m.sps >= self.tau_sps && m.wordsim <= self.tau_ov
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based attempt number.
    pub attempt: usize,
    pub doc: Document,
    pub metrics: MetricPair,
    pub accepted_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Evaluated { candidate: Candidate },
    Unevaluable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: usize,
    pub prompt: String,
    #[serde(flatten)]
    pub outcome: AttemptOutcome,
}

impl Attempt {
    pub fn candidate(&self) -> Option<&Candidate> {
        match &self.outcome {
            AttemptOutcome::Evaluated { candidate } => Some(candidate),
            AttemptOutcome::Unevaluable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageResult {
    pub chosen: Candidate,
    pub all_attempts: Vec<Attempt>,
    pub stopped_early: bool,
    pub paraphraser_calls: usize,
}

/// External paraphrasing model. Returns sectioned markup.
pub trait Paraphraser: Send + Sync {
    fn complete(&self, prompt: &str, source: &Document) -> Result<String>;
}

impl<P: Paraphraser + ?Sized> Paraphraser for &P {
    fn complete(&self, prompt: &str, source: &Document) -> Result<String> {
        (**self).complete(prompt, source)
    }
}

/// Averages per-pair `(sps, wordsim)` values.
pub fn aggregate_pairs(pairs: &[(f64, f64)]) -> Result<MetricPair> {
    if pairs.is_empty() {
        return Err(Error::NoEvaluablePairs("zero narrative pairs".into()));
    }
    let n = pairs.len() as f64;
    let sps = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ws = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(MetricPair::new(sps, ws))
}

/// Scores a candidate against its source over aligned narrative sections.
pub fn evaluate_candidate(
    source: &Document,
    cand: &Document,
    provider: &dyn FeatureProvider,
) -> Result<MetricPair> {
    let src = narrative_spans(source);
    let dst = narrative_spans(cand);
    if src.is_empty() || src.len() != dst.len() {
        return Err(Error::NoEvaluablePairs(format!(
            "{} source narrative sections vs {} in candidate",
            src.len(),
            dst.len()
        )));
    }
    check_structure(source, cand)?;

    let cos = span_cosines(&src, &dst, provider)?;
    let pairs: Vec<(f64, f64)> = cos
        .into_iter()
        .zip(src.iter().zip(&dst))
        .map(|(c, (x, y))| (c, word_sim(x, y)))
        .collect();
    aggregate_pairs(&pairs)
}

fn check_structure(source: &Document, cand: &Document) -> Result<()> {
    if source.sections.len() != cand.sections.len() {
        let index = source
            .sections
            .iter()
            .zip(&cand.sections)
            .position(|(a, b)| a.kind != b.kind)
            .unwrap_or(source.sections.len().min(cand.sections.len()));
        return Err(Error::StructuralMismatch { index });
    }
    for (a, b) in source.sections.iter().zip(&cand.sections) {
        let altered = a.kind != b.kind || (a.kind == SectionKind::Structural && a.text != b.text);
        if altered {
            return Err(Error::StructuralMismatch { index: a.index });
        }
    }
    Ok(())
}

/// Replaces any earlier feedback on `prompt` with directives for whichever
/// threshold failed. Returns `prompt` unchanged when both pass.
pub fn update_prompt(prompt: &str, sps: f64, wordsim: f64, cfg: &ParaphraseConfig) -> String {
    let low_fidelity = sps < cfg.tau_sps;
    let high_overlap = wordsim > cfg.tau_ov;
    if !low_fidelity && !high_overlap {
        return prompt.to_owned();
    }
    let base = prompt
        .find(FEEDBACK_MARKER)
        .map_or(prompt, |i| &prompt[..i]);
    let mut out = String::from(base);
    out.push_str(FEEDBACK_MARKER);
    match (low_fidelity, high_overlap) {
        (true, true) => {
            out.push_str(RAISE_FIDELITY);
            out.push('\n');
            out.push_str(REDUCE_OVERLAP);
        }
        (true, false) => out.push_str(RAISE_FIDELITY),
        (false, true) => out.push_str(REDUCE_OVERLAP),
        (false, false) => unreachable!(),
    }
    out
}

/// Runs the candidate loop for one document.
pub fn generate_sage(
    source: &Document,
    paraphraser: &dyn Paraphraser,
    features: &dyn FeatureProvider,
    cfg: &ParaphraseConfig,
) -> Result<SageResult> {
    cfg.validate()?;
    if source.narrative_count() == 0 {
        return Err(Error::invalid(format!(
            "document {:?} has no narrative section",
            source.id
        )));
    }

    let mut prompt = cfg.base_prompt.clone();
    let mut attempts: Vec<Attempt> = Vec::with_capacity(cfg.max_attempts);
    let mut best: Option<usize> = None;
    let mut best_utility = f64::NEG_INFINITY;

    for n in 1..=cfg.max_attempts {
        let markup = cfg.retry.run(|| paraphraser.complete(&prompt, source))?;
        let evaluated = parse_sectioned_document(&source.id, &markup)
            .and_then(|doc| evaluate_candidate(source, &doc, features).map(|m| (doc, m)));

        let (doc, metrics) = match evaluated {
            Ok(ok) => ok,
            Err(e @ (Error::Parse { .. }
            | Error::NoEvaluablePairs(_)
            | Error::StructuralMismatch { .. })) => {
                tracing::debug!(doc = %source.id, attempt = n, error = %e, "unevaluable attempt");
                attempts.push(Attempt {
                    attempt: n,
                    prompt: prompt.clone(),
                    outcome: AttemptOutcome::Unevaluable {
                        reason: e.to_string(),
                    },
                });
                continue;
            }
            Err(e) => return Err(e),
        };

        let accepted = cfg.accepts(&metrics);
        let candidate = Candidate {
            attempt: n,
            doc,
            metrics,
            accepted_early: accepted,
        };
        if metrics.utility > best_utility {
            best_utility = metrics.utility;
            best = Some(attempts.len());
        }
        attempts.push(Attempt {
            attempt: n,
            prompt: prompt.clone(),
            outcome: AttemptOutcome::Evaluated {
                candidate: candidate.clone(),
            },
        });
        if accepted {
            return Ok(SageResult {
                chosen: candidate,
                paraphraser_calls: attempts.len(),
                all_attempts: attempts,
                stopped_early: true,
            });
        }
        prompt = update_prompt(&prompt, metrics.sps, metrics.wordsim, cfg);
    }

    let Some(best) = best else {
        return Err(Error::NoViableCandidate {
            attempts: attempts.len(),
        });
    };
    let chosen = attempts[best]
        .candidate()
        .cloned()
        .expect("best index points at an evaluated attempt");
    Ok(SageResult {
        chosen,
        paraphraser_calls: attempts.len(),
        all_attempts: attempts,
        stopped_early: false,
    })
}

/// One line of a scripted paraphraser fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub doc_id: String,
    /// 1-based attempt number.
    pub attempt: usize,
    pub markup: String,
}

/// Replays fixed responses keyed by `(doc id, attempt)`; the attempt is
/// the number of calls already made for that document plus one.
#[derive(Debug, Default)]
pub struct ScriptedParaphraser {
    responses: HashMap<(String, usize), String>,
    next_attempt: Mutex<HashMap<String, usize>>,
    prompts: Mutex<Vec<(String, String)>>,
    calls: AtomicUsize,
}

impl ScriptedParaphraser {
    pub fn new(responses: impl IntoIterator<Item = ScriptedResponse>) -> Self {
        Self {
            responses: responses
                .into_iter()
                .map(|r| ((r.doc_id, r.attempt), r.markup))
                .collect(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(jsonl::read::<ScriptedResponse>(path)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// `(doc id, prompt)` for every call so far.
    pub fn prompts(&self) -> Vec<(String, String)> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl Paraphraser for ScriptedParaphraser {
    fn complete(&self, prompt: &str, source: &Document) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let attempt = {
            let mut next = self.next_attempt.lock().expect("attempt map poisoned");
            let slot = next.entry(source.id.clone()).or_insert(0);
            *slot += 1;
            *slot
        };
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push((source.id.clone(), prompt.to_owned()));
        self.responses
            .get(&(source.id.clone(), attempt))
            .cloned()
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no scripted response for {:?} attempt {attempt}",
                    source.id
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let m = aggregate_pairs(&[(0.8, 0.2), (0.6, 0.4)]).unwrap();
        assert!((m.sps - 0.7).abs() < 1e-12);
        assert!((m.wordsim - 0.3).abs() < 1e-12);
        assert!((m.utility - 0.4).abs() < 1e-12);
        assert_eq!(m.utility, m.sps - m.wordsim);
        assert!(aggregate_pairs(&[]).is_err());
    }

    fn cfg() -> ParaphraseConfig {
        ParaphraseConfig {
            base_prompt: "BASE".into(),
            ..ParaphraseConfig::default()
        }
    }

    #[test]
    fn prompt_unchanged_when_thresholds_met() {
        assert_eq!(update_prompt("BASE", 0.7, 0.2, &cfg()), "BASE");
    }

    #[test]
    fn prompt_gets_fidelity_directive() {
        let p = update_prompt("BASE", 0.4, 0.2, &cfg());
        assert_eq!(p, format!("BASE{FEEDBACK_MARKER}{RAISE_FIDELITY}"));
    }

    #[test]
    fn prompt_gets_both_directives_in_order() {
        let p = update_prompt("BASE", 0.4, 0.5, &cfg());
        assert_eq!(
            p,
            format!("BASE{FEEDBACK_MARKER}{RAISE_FIDELITY}\n{REDUCE_OVERLAP}")
        );
        // Feedback from an earlier round is replaced, not stacked.
        let again = update_prompt(&p, 0.7, 0.5, &cfg());
        assert_eq!(again, format!("BASE{FEEDBACK_MARKER}{REDUCE_OVERLAP}"));
        assert!(again.starts_with("BASE"));
    }

    #[test]
    fn thresholds_are_inclusive() {
        let c = ParaphraseConfig::default();
        assert!(c.accepts(&MetricPair::new(0.60, 0.35)));
        assert!(!c.accepts(&MetricPair::new(0.5999, 0.35)));
        assert!(!c.accepts(&MetricPair::new(0.60, 0.3501)));
    }

    #[test]
    fn config_validation() {
        assert!(ParaphraseConfig {
            max_attempts: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(ParaphraseConfig {
            tau_ov: 1.5,
            ..cfg()
        }
        .validate()
        .is_err());
        cfg().validate().unwrap();
    }
}
