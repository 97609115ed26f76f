//! Config-driven batch pipeline: parse, rewrite, redact, score, attack,
//! evaluate and audit, with content-hash caching per stage.
//!
//! Every stage reads and writes line-delimited JSON under the output
//! directory. A stage is skipped when the hash of its inputs and config
//! section matches its stamp and its outputs are unchanged on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{load_labeled_corpus, parse_sectioned_document, Document, Label, LabeledCorpus};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, render_report, ReportFormat, ResultTable, Regime, ScoredExample};
use crate::http::{ChatCompletion, ChatTagger, HttpEndpoint, ServiceFeatureProvider, ServiceTokenScorer};
use crate::jsonl;
use crate::metrics::{CachingProvider, FeatureProvider, FeatureSource, FileFeatureProvider, SparseFeatureVector};
use crate::paraphrase::{generate_sage, AttemptOutcome, ParaphraseConfig, Paraphraser, ScriptedParaphraser};
use crate::protocol::{audit, semantic_equivalent, AuditConfig, AuditRecord};
use crate::redaction::{build_ft_f, build_sage_r, extract_facts, RedactedRecord, ScriptedTagger, Tagger};
use crate::retry::RetryPolicy;
use crate::scoring::{
    load_records, loss_score, min_k, min_k_pp, run_attacks, score_variants, AttackConfig, AttackKind,
    RecordSet, ScorePlan, TokenScore, TokenScoreRecord, TokenScorer, Variant,
};

pub const PARSED: &str = "parsed.jsonl";
pub const SAGE: &str = "sage.jsonl";
pub const SAGE_R: &str = "sage_r.jsonl";
pub const FT_F: &str = "ft_f.jsonl";
pub const SCORES_DIR: &str = "scores";
pub const ATTACKS_DIR: &str = "attacks";
pub const AUDIT_SCORES: &str = "scores/audit.jsonl";
pub const AUDIT: &str = "audit.jsonl";
pub const STAMPS_DIR: &str = ".stamps";
/// Run log with per-stage call counts; not a primary artifact.
pub const RUN_LOG: &str = "run.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    fn resolve(&self, role: &str) -> Result<HttpEndpoint> {
        let api_key = match &self.credential_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("{role}: environment variable {var} is not set"))
            })?),
        };
        Ok(HttpEndpoint {
            url: self.url.clone(),
            api_key,
            model: self.model.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub paraphraser: Option<EndpointConfig>,
    pub tagger: Option<EndpointConfig>,
    pub features: Option<EndpointConfig>,
    /// Token scorers by name, referenced from score runs and the audit.
    #[serde(default)]
    pub scorers: BTreeMap<String, EndpointConfig>,
}

/// File-backed stand-ins for the services.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixtures {
    pub paraphrases: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub tags_original: Option<PathBuf>,
    pub tags_sage: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub max_attempts: usize,
    pub tau_sps: f64,
    pub tau_ov: f64,
    pub k_percent: f64,
    pub fpr_target: f64,
    pub zlib_level: u32,
    pub tagger_budget: usize,
    pub feature_batch: usize,
    pub max_in_flight: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            tau_sps: 0.60,
            tau_ov: 0.35,
            k_percent: crate::scoring::DEFAULT_K_PERCENT,
            fpr_target: crate::eval::DEFAULT_FPR_TARGET,
            zlib_level: crate::scoring::DEFAULT_ZLIB_LEVEL,
            tagger_budget: crate::redaction::DEFAULT_TAGGER_BUDGET,
            feature_batch: 16,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub output: PathBuf,
}

/// Token scores of the original corpus under one target model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRun {
    pub regime: Regime,
    pub dataset: String,
    /// Distinguishes runs averaged into the same cell, such as targets
    /// trained on different paraphrasers' rewrites.
    #[serde(default)]
    pub replicate: Option<String>,
    #[serde(default)]
    pub records: Option<PathBuf>,
    #[serde(default)]
    pub scorer: Option<String>,
    #[serde(default)]
    pub reference: Option<String>,
}

impl ScoreRun {
    pub fn run_id(&self) -> String {
        match &self.replicate {
            Some(r) => format!("{}/{}/{r}", self.regime, self.dataset),
            None => format!("{}/{}", self.regime, self.dataset),
        }
    }

    fn file_stem(&self) -> String {
        self.run_id()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default)]
    pub records: Option<PathBuf>,
    #[serde(default)]
    pub scorer: Option<String>,
    pub attack: AttackKind,
    pub tau_mia: f64,
    pub eps_rob: f64,
    #[serde(default)]
    pub tau_sps: Option<f64>,
    #[serde(default)]
    pub eps_util: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub paths: Paths,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub fixtures: Fixtures,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub scoring: ScorePlan,
    #[serde(default)]
    pub attack_signs: BTreeMap<AttackKind, f64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub score_runs: Vec<ScoreRun>,
    #[serde(default)]
    pub audit: Option<AuditSection>,
}

fn default_parallelism() -> usize {
    4
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub fpr_target: Option<f64>,
    pub k_percent: Option<f64>,
}

impl PipelineConfig {
    /// Parses a TOML config; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut cfg.paths.corpus);
        abs(&mut cfg.paths.output);
        for p in [
            &mut cfg.fixtures.paraphrases,
            &mut cfg.fixtures.features,
            &mut cfg.fixtures.tags_original,
            &mut cfg.fixtures.tags_sage,
        ]
        .into_iter()
        .flatten()
        {
            abs(p);
        }
        for r in &mut cfg.score_runs {
            if let Some(p) = &mut r.records {
                abs(p);
            }
        }
        if let Some(p) = cfg.audit.as_mut().and_then(|a| a.records.as_mut()) {
            abs(p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.output {
            self.paths.output = p.clone();
        }
        if let Some(n) = o.parallelism {
            self.parallelism = n;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(f) = o.fpr_target {
            self.defaults.fpr_target = f;
        }
        if let Some(k) = o.k_percent {
            self.defaults.k_percent = k;
        }
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be a positive integer".into()));
        }
        if !(0.0..=1.0).contains(&self.defaults.fpr_target) {
            return Err(Error::Config("defaults.fpr_target must lie in [0, 1]".into()));
        }
        self.paraphrase_config().validate()?;
        let mut files: Vec<&Path> = vec![&self.paths.corpus];
        files.extend(
            [
                &self.fixtures.paraphrases,
                &self.fixtures.features,
                &self.fixtures.tags_original,
                &self.fixtures.tags_sage,
            ]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path),
        );
        files.extend(self.score_runs.iter().filter_map(|r| r.records.as_deref()));
        files.extend(self.audit.as_ref().and_then(|a| a.records.as_deref()));
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("{} does not exist", f.display())));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for r in &self.score_runs {
            if r.records.is_some() == r.scorer.is_some() {
                return Err(Error::Config(format!(
                    "score run {} needs exactly one of records or scorer",
                    r.run_id()
                )));
            }
            if !ids.insert(r.run_id()) {
                return Err(Error::Config(format!("duplicate score run {}", r.run_id())));
            }
        }
        if let Some(a) = &self.audit {
            if a.records.is_some() == a.scorer.is_some() {
                return Err(Error::Config("audit needs exactly one of records or scorer".into()));
            }
            if !matches!(a.attack, AttackKind::Loss | AttackKind::MinK | AttackKind::MinKPp) {
                return Err(Error::Config(format!(
                    "audit attack must be a single-record attack (loss, min_k, min_k_pp), got {}",
                    a.attack.id()
                )));
            }
            self.audit_config(a).validate()?;
        }
        Ok(())
    }

    pub fn paraphrase_config(&self) -> ParaphraseConfig {
        ParaphraseConfig {
            max_attempts: self.defaults.max_attempts,
            tau_sps: self.defaults.tau_sps,
            tau_ov: self.defaults.tau_ov,
            retry: self.retry,
            ..ParaphraseConfig::default()
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let mut cfg = AttackConfig {
            k_percent: self.defaults.k_percent,
            zlib_level: self.defaults.zlib_level,
            signs: self.attack_signs.clone(),
            ..AttackConfig::default()
        };
        cfg.bag_of_words.seed = self.seed;
        cfg
    }

    fn audit_config(&self, a: &AuditSection) -> AuditConfig {
        AuditConfig {
            tau_mia: a.tau_mia,
            eps_rob: a.eps_rob,
            tau_sps: a.tau_sps.unwrap_or(self.defaults.tau_sps),
            eps_util: a.eps_util,
        }
    }

    fn scorer(&self, name: &str, role: &str) -> Result<HttpEndpoint> {
        self.endpoints
            .scorers
            .get(name)
            .ok_or_else(|| Error::Config(format!("{role}: no [endpoints.scorers.{name}] section")))?
            .resolve(role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Parse,
    Sage,
    SageR,
    FtF,
    Score,
    Attack,
    Eval,
    Audit,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Parse,
        Stage::Sage,
        Stage::SageR,
        Stage::FtF,
        Stage::Score,
        Stage::Attack,
        Stage::Eval,
        Stage::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Parse => "parse",
            Stage::Sage => "sage",
            Stage::SageR => "sage-r",
            Stage::FtF => "ft-f",
            Stage::Score => "score",
            Stage::Attack => "attack",
            Stage::Eval => "eval",
            Stage::Audit => "audit",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// Counts calls made through a provider handle.
struct Counted<T: ?Sized> {
    inner: Box<T>,
    calls: Arc<AtomicUsize>,
}

impl<T: ?Sized> Counted<T> {
    fn new(inner: Box<T>, calls: &Arc<AtomicUsize>) -> Self {
        Self {
            inner,
            calls: Arc::clone(calls),
        }
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl Paraphraser for Counted<dyn Paraphraser> {
    fn complete(&self, prompt: &str, source: &Document) -> Result<String> {
        self.tick();
        self.inner.complete(prompt, source)
    }
}

impl Tagger for Counted<dyn Tagger> {
    fn tag(&self, doc: &Document) -> Result<String> {
        self.tick();
        self.inner.tag(doc)
    }
}

impl FeatureProvider for Counted<dyn FeatureProvider> {
    fn fetch(&self, texts: &[&str]) -> Result<Vec<SparseFeatureVector>> {
        self.tick();
        self.inner.fetch(texts)
    }
    fn source(&self) -> FeatureSource {
        self.inner.source()
    }
}

impl TokenScorer for Counted<dyn TokenScorer> {
    fn score(&self, text: &str, prefix: Option<&str>, want_moments: bool) -> Result<Vec<TokenScore>> {
        self.tick();
        self.inner.score(text, prefix, want_moments)
    }
}

/// One line of the SAGE output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageRecord {
    pub id: String,
    pub markup: String,
    pub attempt: usize,
    pub sps: f64,
    pub wordsim: f64,
    pub utility: f64,
    pub stopped_early: bool,
    pub paraphraser_calls: usize,
    pub attempts: Vec<AttemptLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wordsim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unevaluable: Option<String>,
}

/// Which attacks ran for a score run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub run: String,
    pub available: Vec<AttackKind>,
    pub unavailable: BTreeMap<AttackKind, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    inputs: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub provider_calls: usize,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
    pub provider_calls: usize,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    jsonl::write_atomic(path, jsonl::to_string(records)?.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    jsonl::write_atomic(path, s.as_bytes())
}

pub struct Pipeline {
    cfg: PipelineConfig,
    pool: rayon::ThreadPool,
    calls: Arc<AtomicUsize>,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        std::fs::create_dir_all(&cfg.paths.output).map_err(|e| Error::io(&cfg.paths.output, e))?;
        Ok(Self {
            cfg,
            pool,
            calls: Arc::new(AtomicUsize::new(0)),
            force: false,
        })
    }

    /// Re-run stages even when their stamps match.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.output.join(rel)
    }

    fn score_file(&self, run: &ScoreRun) -> String {
        format!("{SCORES_DIR}/{}.jsonl", run.file_stem())
    }

    fn attack_file(&self, run: &ScoreRun) -> String {
        format!("{ATTACKS_DIR}/{}.jsonl", run.file_stem())
    }

    fn availability_file(&self, run: &ScoreRun) -> String {
        format!("{ATTACKS_DIR}/{}.availability.json", run.file_stem())
    }

    /// Stages run by `all`: audit only when configured.
    pub fn all_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Audit || self.cfg.audit.is_some())
            .collect()
    }

    /// Confirms every provider the stages need is configured, without
    /// contacting anything.
    pub fn check(&self, stages: &[Stage]) -> Result<()> {
        let c = &self.cfg;
        for stage in stages {
            match stage {
                Stage::Sage => {
                    if c.fixtures.paraphrases.is_none() {
                        need(&c.endpoints.paraphraser, "sage", "paraphrases", "paraphraser")?;
                    }
                    if c.fixtures.features.is_none() {
                        need(&c.endpoints.features, "sage", "features", "features")?;
                    }
                }
                Stage::SageR if c.fixtures.tags_sage.is_none() => {
                    need(&c.endpoints.tagger, "sage-r", "tags_sage", "tagger")?;
                }
                Stage::FtF if c.fixtures.tags_original.is_none() => {
                    need(&c.endpoints.tagger, "ft-f", "tags_original", "tagger")?;
                }
                Stage::Score => {
                    if c.score_runs.is_empty() {
                        return Err(Error::Config("score: no [[score_runs]] configured".into()));
                    }
                    for r in &c.score_runs {
                        for name in r.scorer.iter().chain(&r.reference) {
                            c.scorer(name, &format!("score run {}", r.run_id()))?;
                        }
                    }
                    if let Some(name) = c.audit.as_ref().and_then(|a| a.scorer.as_ref()) {
                        c.scorer(name, "audit")?;
                    }
                }
                Stage::Audit if c.audit.is_none() => {
                    return Err(Error::Config("audit: no [audit] section".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Input files and config section that determine a stage's outputs.
    fn stage_inputs(&self, stage: Stage) -> (Vec<PathBuf>, Value) {
        let c = &self.cfg;
        let endpoint = |e: &Option<EndpointConfig>| e.as_ref().map(|e| json!({"url": e.url, "model": e.model}));
        let mut files = Vec::new();
        let section = match stage {
            Stage::Parse => {
                files.push(c.paths.corpus.clone());
                json!({})
            }
            Stage::Sage => {
                files.push(self.out(PARSED));
                files.extend(c.fixtures.paraphrases.clone());
                files.extend(c.fixtures.features.clone());
                json!({
                    "paraphrase": c.paraphrase_config(),
                    "paraphraser": endpoint(&c.endpoints.paraphraser),
                    "features": endpoint(&c.endpoints.features),
                })
            }
            Stage::SageR | Stage::FtF => {
                let (input, tags) = if stage == Stage::SageR {
                    (SAGE, &c.fixtures.tags_sage)
                } else {
                    (PARSED, &c.fixtures.tags_original)
                };
                files.push(self.out(input));
                files.extend(tags.clone());
                json!({"budget": c.defaults.tagger_budget, "tagger": endpoint(&c.endpoints.tagger)})
            }
            Stage::Score => {
                files.push(c.paths.corpus.clone());
                files.extend(c.score_runs.iter().filter_map(|r| r.records.clone()));
                if let Some(a) = &c.audit {
                    match &a.records {
                        Some(p) => files.push(p.clone()),
                        None => files.extend([self.out(SAGE), self.out(SAGE_R)]),
                    }
                }
                let scorers: BTreeMap<&String, Value> = c
                    .endpoints
                    .scorers
                    .iter()
                    .map(|(k, e)| (k, json!({"url": e.url, "model": e.model})))
                    .collect();
                json!({
                    "runs": c.score_runs,
                    "plan": c.scoring,
                    "scorers": scorers,
                    "audit": c.audit.as_ref().map(|a| (&a.records, &a.scorer)),
                })
            }
            Stage::Attack => {
                files.push(c.paths.corpus.clone());
                files.extend(c.score_runs.iter().map(|r| self.out(&self.score_file(r))));
                json!({"attack": c.attack_config(), "runs": c.score_runs.iter().map(ScoreRun::run_id).collect::<Vec<_>>()})
            }
            Stage::Eval => {
                files.extend(c.score_runs.iter().map(|r| self.out(&self.attack_file(r))));
                json!({
                    "fpr_target": c.defaults.fpr_target,
                    "runs": c.score_runs.iter().map(|r| (r.run_id(), r.regime, &r.dataset)).collect::<Vec<_>>(),
                })
            }
            Stage::Audit => {
                files.push(c.paths.corpus.clone());
                files.push(self.out(AUDIT_SCORES));
                if self.out(SAGE).is_file() {
                    files.push(self.out(SAGE));
                }
                json!({
                    "audit": c.audit.as_ref().map(|a| (a.attack, self.cfg.audit_config(a))),
                    "k_percent": c.defaults.k_percent,
                })
            }
        };
        (files, section)
    }

    fn stage_outputs(&self, stage: Stage) -> Vec<String> {
        let runs = &self.cfg.score_runs;
        match stage {
            Stage::Parse => vec![PARSED.into()],
            Stage::Sage => vec![SAGE.into()],
            Stage::SageR => vec![SAGE_R.into()],
            Stage::FtF => vec![FT_F.into()],
            Stage::Score => {
                let mut v: Vec<String> = runs.iter().map(|r| self.score_file(r)).collect();
                if self.cfg.audit.is_some() {
                    v.push(AUDIT_SCORES.into());
                }
                v
            }
            Stage::Attack => runs
                .iter()
                .flat_map(|r| [self.attack_file(r), self.availability_file(r)])
                .collect(),
            Stage::Eval => vec!["report.md".into(), "report.tsv".into(), "report.json".into()],
            Stage::Audit => vec![AUDIT.into()],
        }
    }

    fn input_hash(&self, stage: Stage) -> Result<String> {
        let (files, section) = self.stage_inputs(stage);
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(&section)?);
        for f in files {
            h.update([0]);
            h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            h.update([0]);
            h.update(file_sha256(&f)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out(&format!("{STAMPS_DIR}/{}.json", stage.name()))
    }

    fn up_to_date(&self, stage: Stage, inputs: &str) -> bool {
        let Ok(text) = std::fs::read_to_string(self.stamp_path(stage)) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
            return false;
        };
        stamp.inputs == inputs
            && stamp.outputs.len() == self.stage_outputs(stage).len()
            && stamp
                .outputs
                .iter()
                .all(|(rel, sha)| file_sha256(&self.out(rel)).is_ok_and(|s| &s == sha))
    }

    /// Runs `stages` in order, skipping those whose stamps match.
    pub fn run(&self, stages: &[Stage]) -> Result<RunSummary> {
        self.check(stages)?;
        let mut summary = RunSummary::default();
        for &stage in stages {
            let inputs = self.input_hash(stage).map_err(|e| match e {
                Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                    Error::Config(format!(
                        "{stage}: input {} missing; run the earlier stages first",
                        path.display()
                    ))
                }
                e => e,
            })?;
            let outputs = self.stage_outputs(stage);
            if !self.force && self.up_to_date(stage, &inputs) {
                tracing::info!(%stage, "up to date, skipped");
                summary.stages.push(StageOutcome {
                    stage,
                    skipped: true,
                    provider_calls: 0,
                    outputs,
                });
                continue;
            }
            let before = self.calls.load(Ordering::Relaxed);
            tracing::info!(%stage, "running");
            self.run_stage(stage)?;
            let provider_calls = self.calls.load(Ordering::Relaxed) - before;
            let stamp = Stamp {
                inputs,
                outputs: outputs
                    .iter()
                    .map(|rel| Ok((rel.clone(), file_sha256(&self.out(rel))?)))
                    .collect::<Result<_>>()?,
            };
            write_json(&self.stamp_path(stage), &stamp)?;
            summary.stages.push(StageOutcome {
                stage,
                skipped: false,
                provider_calls,
                outputs,
            });
        }
        summary.provider_calls = summary.stages.iter().map(|s| s.provider_calls).sum();
        write_json(&self.out(RUN_LOG), &summary)?;
        Ok(summary)
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Parse => self.parse(),
            Stage::Sage => self.sage(),
            Stage::SageR => self.redact(true),
            Stage::FtF => self.redact(false),
            Stage::Score => self.score(),
            Stage::Attack => self.attack(),
            Stage::Eval => self.eval(),
            Stage::Audit => self.audit(),
        }
    }

    fn corpus(&self) -> Result<LabeledCorpus> {
        load_labeled_corpus(&self.cfg.paths.corpus)
    }

    fn parse(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let docs: Vec<Document> = self.pool.install(|| {
            corpus
                .examples
                .par_iter()
                .map(|e| parse_sectioned_document(&e.id, &e.text))
                .collect::<Result<_>>()
        })?;
        write_jsonl(&self.out(PARSED), &docs)
    }

    fn paraphraser(&self) -> Result<Counted<dyn Paraphraser>> {
        let c = &self.cfg;
        let inner: Box<dyn Paraphraser> = match (&c.fixtures.paraphrases, &c.endpoints.paraphraser) {
            (Some(p), _) => Box::new(ScriptedParaphraser::load(p)?),
            (None, Some(e)) => Box::new(ChatCompletion::new(e.resolve("paraphraser")?, c.retry)),
            (None, None) => return Err(Error::Config("sage: no paraphraser configured".into())),
        };
        Ok(Counted::new(inner, &self.calls))
    }

    fn features(&self) -> Result<CachingProvider<Counted<dyn FeatureProvider>>> {
        let c = &self.cfg;
        let inner: Box<dyn FeatureProvider> = match (&c.fixtures.features, &c.endpoints.features) {
            (Some(p), _) => Box::new(FileFeatureProvider::load(p)?),
            (None, Some(e)) => {
                let mut s = ServiceFeatureProvider::new(e.resolve("features")?, c.retry);
                s.batch_size = c.defaults.feature_batch;
                s.max_in_flight = c.defaults.max_in_flight;
                Box::new(s)
            }
            (None, None) => return Err(Error::Config("sage: no feature provider configured".into())),
        };
        Ok(CachingProvider::new(Counted::new(inner, &self.calls)))
    }

    fn tagger(&self, fixture: &Option<PathBuf>, stage: &str) -> Result<Counted<dyn Tagger>> {
        let c = &self.cfg;
        let inner: Box<dyn Tagger> = match (fixture, &c.endpoints.tagger) {
            (Some(p), _) => Box::new(ScriptedTagger::load(p)?),
            (None, Some(e)) => Box::new(ChatTagger::new(ChatCompletion::new(
                e.resolve("tagger")?,
                c.retry,
            ))),
            (None, None) => return Err(Error::Config(format!("{stage}: no tagger configured"))),
        };
        Ok(Counted::new(inner, &self.calls))
    }

    fn scorer(&self, name: &str, role: &str) -> Result<Counted<dyn TokenScorer>> {
        let e = self.cfg.scorer(name, role)?;
        Ok(Counted::new(
            Box::new(ServiceTokenScorer::new(e, self.cfg.retry)),
            &self.calls,
        ))
    }

    fn sage(&self) -> Result<()> {
        let docs: Vec<Document> = jsonl::read(&self.out(PARSED))?;
        let paraphraser = self.paraphraser()?;
        let features = self.features()?;
        let cfg = self.cfg.paraphrase_config();
        let records: Vec<SageRecord> = self.pool.install(|| {
            docs.par_iter()
                .map(|doc| {
                    let r = generate_sage(doc, &paraphraser, &features, &cfg)
                        .map_err(|e| Error::invalid(format!("{}: {e}", doc.id)))?;
                    Ok(SageRecord {
                        id: doc.id.clone(),
                        markup: r.chosen.doc.render(),
                        attempt: r.chosen.attempt,
                        sps: r.chosen.metrics.sps,
                        wordsim: r.chosen.metrics.wordsim,
                        utility: r.chosen.metrics.utility,
                        stopped_early: r.stopped_early,
                        paraphraser_calls: r.paraphraser_calls,
                        attempts: r
                            .all_attempts
                            .iter()
                            .map(|a| match &a.outcome {
                                AttemptOutcome::Evaluated { candidate } => AttemptLog {
                                    attempt: a.attempt,
                                    sps: Some(candidate.metrics.sps),
                                    wordsim: Some(candidate.metrics.wordsim),
                                    unevaluable: None,
                                },
                                AttemptOutcome::Unevaluable { reason } => AttemptLog {
                                    attempt: a.attempt,
                                    sps: None,
                                    wordsim: None,
                                    unevaluable: Some(reason.clone()),
                                },
                            })
                            .collect(),
                    })
                })
                .collect::<Result<_>>()
        })?;
        write_jsonl(&self.out(SAGE), &records)
    }

    fn redact(&self, sage_r: bool) -> Result<()> {
        let budget = self.cfg.defaults.tagger_budget;
        let (docs, tagger, out) = if sage_r {
            let records: Vec<SageRecord> = jsonl::read(&self.out(SAGE))?;
            let docs = records
                .iter()
                .map(|r| parse_sectioned_document(&r.id, &r.markup))
                .collect::<Result<Vec<_>>>()?;
            (docs, self.tagger(&self.cfg.fixtures.tags_sage, "sage-r")?, SAGE_R)
        } else {
            let docs: Vec<Document> = jsonl::read(&self.out(PARSED))?;
            (docs, self.tagger(&self.cfg.fixtures.tags_original, "ft-f")?, FT_F)
        };
        let records: Vec<RedactedRecord> = self.pool.install(|| {
            docs.par_iter()
                .map(|doc| {
                    let anchors = extract_facts(doc, &tagger, budget)?;
                    let red = if sage_r {
                        build_sage_r(doc, &anchors)?
                    } else {
                        build_ft_f(doc, &anchors)
                    };
                    Ok(RedactedRecord::new(doc.id.clone(), red))
                })
                .collect::<Result<_>>()
        })?;
        write_jsonl(&self.out(out), &records)
    }

    fn score(&self) -> Result<()> {
        let corpus = self.corpus()?;
        for run in &self.cfg.score_runs {
            let mut records = match (&run.records, &run.scorer) {
                (Some(p), _) => load_records(p)?,
                (None, Some(name)) => {
                    let role = format!("score run {}", run.run_id());
                    let target = self.scorer(name, &role)?;
                    let reference = run.reference.as_ref().map(|r| self.scorer(r, &role)).transpose()?;
                    let items: Vec<(&str, &str)> =
                        corpus.examples.iter().map(|e| (e.id.as_str(), e.text.as_str())).collect();
                    self.score_texts(&items, &target, reference.as_ref().map(|r| r as &dyn TokenScorer), &self.cfg.scoring)?
                }
                (None, None) => unreachable!("validated"),
            };
            records.sort_by(|a, b| (&a.id, a.variant).cmp(&(&b.id, b.variant)));
            RecordSet::new(records.iter().cloned())?;
            write_jsonl(&self.out(&self.score_file(run)), &records)?;
        }
        if let Some(a) = &self.cfg.audit {
            let mut records = match (&a.records, &a.scorer) {
                (Some(p), _) => load_records(p)?,
                (None, Some(name)) => {
                    let texts = self.audit_texts(&corpus)?;
                    let items: Vec<(&str, &str)> = texts.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
                    let plan = ScorePlan {
                        want_moments: a.attack == AttackKind::MinKPp,
                        ..ScorePlan::default()
                    };
                    self.score_texts(&items, &self.scorer(name, "audit")?, None, &plan)?
                }
                (None, None) => unreachable!("validated"),
            };
            records.retain(|r| r.variant == Variant::Original);
            records.sort_by(|a, b| a.id.cmp(&b.id));
            write_jsonl(&self.out(AUDIT_SCORES), &records)?;
        }
        Ok(())
    }

    fn score_texts(
        &self,
        items: &[(&str, &str)],
        target: &dyn TokenScorer,
        reference: Option<&dyn TokenScorer>,
        plan: &ScorePlan,
    ) -> Result<Vec<TokenScoreRecord>> {
        let per_text: Vec<Vec<TokenScoreRecord>> = self.pool.install(|| {
            items
                .par_iter()
                .map(|(id, text)| score_variants(id, text, target, reference, plan))
                .collect::<Result<_>>()
        })?;
        Ok(per_text.into_iter().flatten().collect())
    }

    /// `(id, text)` for each original text and its rewrites.
    fn audit_texts(&self, corpus: &LabeledCorpus) -> Result<Vec<(String, String)>> {
        let sage: BTreeMap<String, String> = jsonl::read::<SageRecord>(&self.out(SAGE))?
            .into_iter()
            .map(|r| (r.id, r.markup))
            .collect();
        let sage_r: BTreeMap<String, String> = jsonl::read::<RedactedRecord>(&self.out(SAGE_R))?
            .into_iter()
            .map(|r| (r.id, r.text))
            .collect();
        let mut out = Vec::new();
        for e in &corpus.examples {
            out.push((e.id.clone(), e.text.clone()));
            if let Some(t) = sage.get(&e.id) {
                out.push((format!("{}/sage", e.id), t.clone()));
            }
            if let Some(t) = sage_r.get(&e.id) {
                out.push((format!("{}/sage-r", e.id), t.clone()));
            }
        }
        Ok(out)
    }

    fn attack(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let cfg = self.cfg.attack_config();
        let label: BTreeMap<&str, Label> = corpus.examples.iter().map(|e| (e.id.as_str(), e.label)).collect();
        for run in &self.cfg.score_runs {
            let records = RecordSet::new(load_records(&self.out(&self.score_file(run)))?)?;
            let result = self.pool.install(|| run_attacks(&corpus, &records, &cfg))?;
            let mut scored: Vec<ScoredExample> = result
                .scores
                .iter()
                .map(|s| ScoredExample {
                    id: s.id.clone(),
                    attack: s.attack,
                    score: s.score,
                    label: label[s.id.as_str()],
                })
                .collect();
            scored.sort_by_key(|s| s.attack);
            write_jsonl(&self.out(&self.attack_file(run)), &scored)?;
            write_json(
                &self.out(&self.availability_file(run)),
                &Availability {
                    run: run.run_id(),
                    available: result.available(),
                    unavailable: result.unavailable,
                },
            )?;
        }
        Ok(())
    }

    /// Result table over every score run, replicates averaged per cell.
    pub fn result_table(&self) -> Result<ResultTable> {
        let mut groups: BTreeMap<(Regime, &str), Vec<ResultTable>> = BTreeMap::new();
        for run in &self.cfg.score_runs {
            let scored: Vec<ScoredExample> = jsonl::read(&self.out(&self.attack_file(run)))?;
            let t = ResultTable::from_scores(
                &scored,
                run.regime,
                &run.dataset,
                self.cfg.defaults.fpr_target,
                &run.run_id(),
            )?;
            groups.entry((run.regime, run.dataset.as_str())).or_default().push(t);
        }
        groups
            .into_values()
            .try_fold(ResultTable::default(), |acc, tables| acc.merge(aggregate_runs(&tables)?))
    }

    fn eval(&self) -> Result<()> {
        let table = self.result_table()?;
        for (name, format) in [
            ("report.md", ReportFormat::Markdown),
            ("report.tsv", ReportFormat::Tsv),
            ("report.json", ReportFormat::Json),
        ] {
            jsonl::write_atomic(&self.out(name), render_report(&table, format)?.as_bytes())?;
        }
        Ok(())
    }

    fn audit(&self) -> Result<()> {
        let a = self
            .cfg
            .audit
            .as_ref()
            .ok_or_else(|| Error::Config("audit: no [audit] section".into()))?;
        let cfg = self.cfg.audit_config(a);
        let corpus = self.corpus()?;
        let by_id: BTreeMap<String, TokenScoreRecord> = load_records(&self.out(AUDIT_SCORES))?
            .into_iter()
            .map(|r| (r.id.clone(), r))
            .collect();
        let sps: BTreeMap<String, f64> = if self.out(SAGE).is_file() {
            jsonl::read::<SageRecord>(&self.out(SAGE))?
                .into_iter()
                .map(|r| (r.id, r.sps))
                .collect()
        } else {
            BTreeMap::new()
        };
        let k = self.cfg.defaults.k_percent;
        let score = |r: &TokenScoreRecord| -> Result<f64> {
            Ok(match a.attack {
                AttackKind::Loss => loss_score(r)?.score,
                AttackKind::MinK => min_k(r, k)?.score,
                AttackKind::MinKPp => min_k_pp(r, k)?.score,
                other => unreachable!("validated audit attack {other}"),
            })
        };
        let mut out = Vec::new();
        for e in &corpus.examples {
            let Some(orig) = by_id.get(&e.id) else {
                tracing::warn!(id = %e.id, "no audit scores, skipped");
                continue;
            };
            let prefix = format!("{}/", e.id);
            let transforms: Vec<(&str, &TokenScoreRecord)> = by_id
                .range(prefix.clone()..)
                .take_while(|(id, _)| id.starts_with(&prefix))
                .map(|(id, r)| (&id[prefix.len()..], r))
                .collect();
            if transforms.is_empty() {
                tracing::warn!(id = %e.id, "no transformed texts scored, skipped");
                continue;
            }
            let scores_tx = transforms.iter().map(|(_, r)| score(r)).collect::<Result<Vec<_>>>()?;
            let report = audit(&e.id, score(orig)?, &scores_tx, &cfg)?;
            let mut equivalence = BTreeMap::new();
            if let (Some(s), true) = (sps.get(&e.id), transforms.iter().any(|(n, _)| *n == "sage")) {
                equivalence.insert("sage".to_owned(), semantic_equivalent(*s, None, &cfg)?);
            }
            out.push(AuditRecord {
                report,
                transforms: transforms.iter().map(|(n, _)| n.to_string()).collect(),
                equivalence,
                config: cfg,
            });
        }
        write_jsonl(&self.out(AUDIT), &out)
    }
}

fn need(endpoint: &Option<EndpointConfig>, stage: &str, fixture: &str, role: &str) -> Result<()> {
    match endpoint {
        Some(e) => e.resolve(role).map(|_| ()),
        None => Err(Error::Config(format!(
            "{stage}: set [fixtures] {fixture} or [endpoints.{role}]"
        ))),
    }
}

/// Machine-readable failure record printed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_owned(),
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{fixture_bundle, write_fixture_bundle};

    fn setup() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_fixture_bundle(dir.path(), &fixture_bundle(0)).unwrap();
        let cfg = PipelineConfig::load(&paths.config).unwrap();
        (dir, cfg)
    }

    #[test]
    fn config_paths_resolve_against_config_dir() {
        let (dir, cfg) = setup();
        assert_eq!(cfg.paths.corpus, dir.path().join("corpus.jsonl"));
        assert_eq!(cfg.score_runs.len(), 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_endpoint_is_a_config_error() {
        let (_dir, mut cfg) = setup();
        cfg.fixtures.paraphrases = None;
        let p = Pipeline::new(cfg).unwrap();
        let err = p.run(&[Stage::Parse, Stage::Sage]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        // Checked before anything ran.
        assert!(!p.out(PARSED).exists());
    }

    #[test]
    fn unset_credential_is_a_config_error() {
        let (_dir, mut cfg) = setup();
        cfg.fixtures.tags_sage = None;
        cfg.endpoints.tagger = Some(EndpointConfig {
            url: "http://127.0.0.1:9".into(),
            credential_env: Some("MIA_AUDIT_TEST_UNSET_KEY".into()),
            model: None,
            timeout_secs: 1,
        });
        let p = Pipeline::new(cfg).unwrap();
        assert!(matches!(p.check(&[Stage::SageR]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml(
            "[paths]\ncorpus = \"c\"\noutput = \"o\"\nbogus = 1\n",
            Path::new("."),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_win() {
        let (_dir, mut cfg) = setup();
        cfg.apply(&Overrides {
            parallelism: Some(1),
            fpr_target: Some(0.05),
            ..Overrides::default()
        });
        assert_eq!(cfg.parallelism, 1);
        assert_eq!(cfg.defaults.fpr_target, 0.05);
    }
}
