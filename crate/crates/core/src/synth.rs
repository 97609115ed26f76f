//! Deterministic synthetic fixtures: labeled corpora with known signal,
//! token-score records, and a small sectioned corpus with scripted
//! paraphrases, tags and features for offline pipeline runs.
//!
//! The feature oracle here is a stand-in: each text is described by the
//! concepts it was generated from, so a faithful rewrite lands close to
//! its source and an off-topic one does not.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{parse_sectioned_document, Document, Example, Label, LabeledCorpus, SectionKind};
use crate::error::Result;
use crate::jsonl;
use crate::metrics::{word_token_seq, FeatureRecord, SparseFeatureVector};
use crate::paraphrase::ScriptedResponse;
use crate::redaction::{AnchorKind, FactualAnchor, ScriptedTagging};
use crate::scoring::{TokenScore, TokenScoreRecord, Variant};
use crate::text_sha256;

pub const FEATURE_DIM: usize = 16_384;
pub const MEMBER_MARKER: &str = "zqmarker";

const FILLER: &[&str] = &[
    "river", "stone", "market", "window", "signal", "harbor", "garden", "ledger", "copper", "lantern",
    "meadow", "engine", "canvas", "thunder", "orchard", "pillar", "compass", "violet", "saddle", "quarry",
    "harvest", "beacon", "timber", "falcon", "glacier", "anchor", "thimble", "marble", "cobalt", "willow",
    "summit", "ember", "barrel", "crimson", "tundra", "velvet", "mosaic", "parcel", "ribbon", "sapphire",
    "walnut", "tavern", "spindle", "lagoon", "pepper", "cinder", "basalt", "juniper", "kestrel", "lattice",
    "and", "the", "of", "with", "near", "under", "over", "for", "into", "from",
];

/// Random filler text of `words` tokens.
fn filler_text(rng: &mut ChaCha8Rng, words: usize) -> Vec<&'static str> {
    (0..words).map(|_| *FILLER.choose(rng).expect("nonempty")).collect()
}

/// Per-variant mean log-probabilities for one text.
fn variant_means(member: f64, signal: f64, doc_noise: f64, ref_noise: f64) -> [(Variant, f64); 5] {
    let s = signal * member;
    let orig = -3.5 + 2.5 * s + doc_noise;
    [
        (Variant::Original, orig),
        (Variant::Lowercase, orig - (0.1 + 0.9 * s)),
        (Variant::PrefixedNonmember, orig - 0.05 + 0.25 * s),
        (Variant::PrefixedMember, orig - 0.3 * s),
        (Variant::ReferenceModel, -3.5 + ref_noise),
    ]
}

/// Token records for every example and all five variants, with moments.
///
/// `signal` in `[0, 1]` scales how far member statistics move in the
/// member-like direction; `noise` is the half-width of per-document
/// jitter. Token counts follow the word count of each text.
pub fn synthetic_records(corpus: &LabeledCorpus, signal: f64, noise: f64, seed: u64) -> Vec<TokenScoreRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.len() * 5);
    for ex in &corpus.examples {
        let n = word_token_seq(&ex.text).len().max(1);
        let member = if ex.label.is_member() { 1.0 } else { 0.0 };
        let doc_noise = rng.random_range(-noise..=noise);
        let ref_noise = rng.random_range(-noise..=noise);
        for (variant, mean) in variant_means(member, signal, doc_noise, ref_noise) {
            // Paired variants wobble a little on their own, so their
            // differences from the original are not noise-free.
            let jitter = match variant {
                Variant::Original | Variant::ReferenceModel => 0.0,
                _ => rng.random_range(-noise / 4.0..=noise / 4.0),
            };
            let mean = mean + jitter;
            let tokens = (0..n)
                .map(|_| {
                    let lp = (mean + rng.random_range(-0.3..=0.3)).min(-1e-3);
                    let mu = -3.5 + rng.random_range(-0.2..=0.2);
                    let sigma = 1.0 + rng.random_range(0.0..=0.2);
                    TokenScore::with_moments(lp, mu, sigma)
                })
                .collect();
            out.push(TokenScoreRecord {
                id: ex.id.clone(),
                variant,
                tokens,
                text_bytes: ex.text.len(),
            });
        }
    }
    out
}

/// Members carry [`MEMBER_MARKER`]; records separate the classes cleanly.
pub fn separable_fixture(members: usize, nonmembers: usize, seed: u64) -> (LabeledCorpus, Vec<TokenScoreRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(members + nonmembers);
    for i in 0..members + nonmembers {
        let label = if i < members { Label::Member } else { Label::Nonmember };
        let mut words = filler_text(&mut rng, 40);
        if label.is_member() {
            let at = rng.random_range(0..words.len());
            words.insert(at, MEMBER_MARKER);
        }
        examples.push(Example {
            id: format!("sep-{i:04}"),
            text: words.join(" "),
            label,
        });
    }
    let corpus = LabeledCorpus { examples };
    let records = synthetic_records(&corpus, 1.0, 0.2, seed.wrapping_add(1));
    (corpus, records)
}

/// A separable fixture of `n` examples whose labels were then shuffled, so
/// no attack should beat chance.
pub fn permuted_fixture(n: usize, seed: u64) -> (LabeledCorpus, Vec<TokenScoreRecord>) {
    let (mut corpus, records) = separable_fixture(n / 2, n - n / 2, seed);
    let mut labels: Vec<Label> = corpus.examples.iter().map(|e| e.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)));
    for (e, l) in corpus.examples.iter_mut().zip(labels) {
        e.label = l;
    }
    (corpus, records)
}

/// Spans and rewrite style behind one scripted attempt; `None` when the
/// attempt is malformed and never reaches the feature provider.
type ScriptedSpans<'a> = (&'a [Span; 2], Style);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Entity,
    Number,
    Date,
}

#[derive(Debug, Clone)]
enum Piece {
    Literal(&'static str),
    Group(&'static str, &'static str),
    Slot(Slot),
}

/// `{orig|alt}` groups, `<E>` / `<N>` / `<D>` slots, everything else literal.
const TEMPLATES: &[&str] = &[
    "<E> {reported|disclosed} {a steady increase|consistent growth} {in quarterly revenue|of three-month income} {during|over} <D>.",
    "{The committee|A panel} {reviewed|examined} <N> {applications|submissions} {and approved|before endorsing} {most of them|the majority}.",
    "{According to|As stated by} <E>, {the new facility|a freshly built plant} {will employ|is set to hire} <N> {workers|staff members} {by|before} <D>.",
    "{Researchers|Scientists} {observed that|noticed how} {the samples|specimens} {degraded quickly|deteriorated rapidly} {at temperatures above|whenever heat exceeded} <N> {degrees|units}.",
    "{The agreement|This accord}, {signed on|concluded on} <D>, {ended|closed} {a long dispute|a protracted conflict} {with|involving} <E>.",
    "{Local residents|People living nearby} {complained about|objected to} {the noise|racket} {from the construction site|coming from building works} {near|close to} <E>.",
    "{Shares of|Stock in} <E> {fell by|dropped} <N> {percent|points} {after the announcement|following that statement}.",
    "{The museum|This gallery} {acquired|obtained} {a rare manuscript|an unusual codex} {written in|dating from} <D>, {according to|as reported by} <E>.",
    "{Engineers|Technicians} {replaced|swapped out} <N> {damaged cables|faulty wires} {before the inspection|ahead of auditing}.",
    "{Volunteers|Helpers} {planted|set out} <N> {trees|saplings} {along the river|beside that waterway} {in|during} <D>.",
    "{Officials|Authorities} {confirmed that|verified how} <E> {would reopen|was going to open again} {the bridge|that crossing} {next spring|soon}.",
    "{The report|One study} {estimated that|calculated how} <N> {households|families} {lacked reliable internet|were without dependable broadband}.",
];

const ENTITIES: &[&str] = &[
    "Halvorsen Biotech", "Port of Tallinn", "Meridian Rail", "Okafor Textiles", "Lindqvist Foundation",
    "Cedar Valley Council", "Aurelio Marine", "Northgate Bank", "Kestrel Institute", "Brightwater Utilities",
    "Yamada Robotics", "Sable Museum Trust",
];
const NUMBERS: &[&str] = &["4,200", "17.5", "312", "86", "1,050", "23", "640", "9.8", "58", "2,700"];
const DATES: &[&str] = &[
    "March 2019", "12 June 2021", "autumn 2017", "January 2020", "3 May 2018", "late 2022", "July 2016",
    "14 February 2023",
];
const HEADINGS: &[&str] = &["Summary", "Background", "Findings", "Outlook", "Details", "Notes"];

fn parse_template(t: &'static str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut rest = t;
    while !rest.is_empty() {
        let next = rest.find(['{', '<']).unwrap_or(rest.len());
        if next > 0 {
            out.push(Piece::Literal(&rest[..next]));
            rest = &rest[next..];
            continue;
        }
        if let Some(body) = rest.strip_prefix('{') {
            let end = body.find('}').expect("template group is closed");
            let (a, b) = body[..end].split_once('|').expect("template group has two forms");
            out.push(Piece::Group(a, b));
            rest = &body[end + 1..];
        } else {
            let slot = match &rest[..3] {
                "<E>" => Slot::Entity,
                "<N>" => Slot::Number,
                "<D>" => Slot::Date,
                other => panic!("unknown template slot {other}"),
            };
            out.push(Piece::Slot(slot));
            rest = &rest[3..];
        }
    }
    out
}

/// One generated sentence: a template with its slot fillers.
#[derive(Debug, Clone)]
struct Sentence {
    template: usize,
    fillers: Vec<&'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Original,
    /// Every other group rewritten.
    Light,
    /// Every group rewritten.
    Heavy,
}

impl Sentence {
    fn random(rng: &mut ChaCha8Rng, template: usize) -> Self {
        let fillers = parse_template(TEMPLATES[template])
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(Slot::Entity) => Some(*ENTITIES.choose(rng).expect("nonempty")),
                Piece::Slot(Slot::Number) => Some(*NUMBERS.choose(rng).expect("nonempty")),
                Piece::Slot(Slot::Date) => Some(*DATES.choose(rng).expect("nonempty")),
                _ => None,
            })
            .collect();
        Self { template, fillers }
    }

    fn render(&self, style: Style) -> String {
        let mut out = String::new();
        let mut group = 0;
        let mut filler = self.fillers.iter();
        for p in parse_template(TEMPLATES[self.template]) {
            match p {
                Piece::Literal(s) => out.push_str(s),
                Piece::Group(a, b) => {
                    let alt = match style {
                        Style::Original => false,
                        Style::Light => group % 2 == 0,
                        Style::Heavy => true,
                    };
                    out.push_str(if alt { b } else { a });
                    group += 1;
                }
                Piece::Slot(_) => out.push_str(filler.next().expect("one filler per slot")),
            }
        }
        out
    }

    /// Concept keys: groups by their original form, literals and fillers
    /// by word.
    fn concepts(&self, keys: &mut BTreeMap<String, f64>) {
        let mut filler = self.fillers.iter();
        for p in parse_template(TEMPLATES[self.template]) {
            let words: Vec<String> = match p {
                Piece::Literal(s) => word_token_seq(s),
                Piece::Group(a, _) => vec![format!("concept:{a}")],
                Piece::Slot(_) => word_token_seq(filler.next().expect("one filler per slot")),
            };
            for w in words {
                *keys.entry(w).or_insert(0.0) += 1.0;
            }
        }
    }

    fn anchors(&self) -> Vec<FactualAnchor> {
        let slots = parse_template(TEMPLATES[self.template]).into_iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s),
            _ => None,
        });
        slots
            .zip(&self.fillers)
            .map(|(s, v)| {
                let kind = match s {
                    Slot::Entity => AnchorKind::Entity,
                    Slot::Number => AnchorKind::Number,
                    Slot::Date => AnchorKind::Date,
                };
                FactualAnchor::new(*v, kind)
            })
            .collect()
    }
}

fn feature_index(key: &str) -> usize {
    let d = Sha256::digest(key.as_bytes());
    let n = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (n % FEATURE_DIM as u64) as usize
}

/// Synthetic oracle output for a span built from `sentences`. A small
/// text-specific component keeps distinct wordings from being identical.
fn span_features(sentences: &[Sentence], text: &str) -> SparseFeatureVector {
    let mut keys = BTreeMap::new();
    for s in sentences {
        s.concepts(&mut keys);
    }
    let mut by_index: BTreeMap<usize, f64> = BTreeMap::new();
    for (k, v) in keys {
        *by_index.entry(feature_index(&k)).or_insert(0.0) += v;
    }
    *by_index.entry(feature_index(&format!("surface:{text}"))).or_insert(0.0) += 2.5;
    SparseFeatureVector::from_entries(FEATURE_DIM, by_index).expect("positive entries")
}

#[derive(Debug, Clone)]
struct Span {
    sentences: Vec<Sentence>,
}

impl Span {
    fn render(&self, style: Style) -> String {
        self.sentences
            .iter()
            .map(|s| s.render(style))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// How the scripted paraphraser behaves for one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// First attempt passes both gates.
    AcceptFirst,
    /// Too close on the first try, accepted on the second.
    AcceptSecond,
    /// Malformed, then off-topic, then too close: falls back to argmax.
    Fallback,
    /// Structure altered on the first try, accepted on the second.
    StructureDrift,
}

impl Scenario {
    fn for_index(i: usize) -> Self {
        match i % 4 {
            0 => Scenario::AcceptFirst,
            1 => Scenario::AcceptSecond,
            2 => Scenario::Fallback,
            _ => Scenario::StructureDrift,
        }
    }
}

struct GeneratedDoc {
    id: String,
    label: Label,
    title: String,
    heading: String,
    spans: [Span; 2],
    /// Off-topic rewrite used by the fallback scenario.
    drift: [Span; 2],
    scenario: Scenario,
}

impl GeneratedDoc {
    fn markup(&self, spans: &[Span; 2], style: Style, title: &str) -> String {
        let n0 = spans[0].render(style);
        let n1 = spans[1].render(style);
        Document::markup_from(&[
            (SectionKind::Structural, title),
            (SectionKind::Narrative, &n0),
            (SectionKind::Structural, &self.heading),
            (SectionKind::Narrative, &n1),
        ])
    }

    fn original(&self) -> String {
        self.markup(&self.spans, Style::Original, &self.title)
    }

    /// `(markup, spans behind it)` for each scripted attempt.
    fn attempts(&self) -> Vec<(String, Option<ScriptedSpans<'_>>)> {
        let heavy = (self.markup(&self.spans, Style::Heavy, &self.title), Some((&self.spans, Style::Heavy)));
        let light = (self.markup(&self.spans, Style::Light, &self.title), Some((&self.spans, Style::Light)));
        match self.scenario {
            Scenario::AcceptFirst => vec![heavy],
            Scenario::AcceptSecond => vec![light, heavy],
            Scenario::Fallback => {
                let mut broken = self.markup(&self.spans, Style::Heavy, &self.title);
                broken.truncate(broken.rfind("</section>").expect("markup has sections"));
                vec![
                    (broken, None),
                    (self.markup(&self.drift, Style::Heavy, &self.title), Some((&self.drift, Style::Heavy))),
                    light,
                ]
            }
            Scenario::StructureDrift => {
                let retitled = format!("{} (rewritten)", self.title);
                vec![(self.markup(&self.spans, Style::Heavy, &retitled), None), heavy]
            }
        }
    }

    fn anchors(&self) -> Vec<FactualAnchor> {
        let mut seen = std::collections::HashSet::new();
        self.spans
            .iter()
            .flat_map(|s| s.sentences.iter())
            .flat_map(Sentence::anchors)
            .filter(|a| seen.insert(a.value.clone()))
            .collect()
    }
}

fn generate_docs(n: usize, seed: u64) -> Vec<GeneratedDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
            order.shuffle(&mut rng);
            let span = |ts: &[usize], rng: &mut ChaCha8Rng| Span {
                sentences: ts.iter().map(|&t| Sentence::random(rng, t)).collect(),
            };
            let spans = [span(&order[0..3], &mut rng), span(&order[3..5], &mut rng)];
            let drift = [span(&order[5..8], &mut rng), span(&order[8..10], &mut rng)];
            let filed_by = ENTITIES[(i * 5 + 3) % ENTITIES.len()];
            GeneratedDoc {
                id: format!("doc-{i:02}"),
                label: if i % 2 == 0 { Label::Member } else { Label::Nonmember },
                title: format!("# Field report {} (filed by {filed_by})", i + 1),
                heading: format!("## {}", HEADINGS[i % HEADINGS.len()]),
                spans,
                drift,
                scenario: Scenario::for_index(i),
            }
        })
        .collect()
}

/// Everything an offline pipeline run needs.
#[derive(Debug, Clone)]
pub struct FixtureBundle {
    pub corpus: LabeledCorpus,
    pub paraphrases: Vec<ScriptedResponse>,
    pub features: Vec<FeatureRecord>,
    pub tags_original: Vec<ScriptedTagging>,
    pub tags_sage: Vec<ScriptedTagging>,
    /// `(regime label, records)` against the original corpus.
    pub score_runs: Vec<(String, Vec<TokenScoreRecord>)>,
    /// Original-variant records for each text and its rewrites, keyed
    /// `<id>`, `<id>/sage`, `<id>/sage-r`.
    pub audit_records: Vec<TokenScoreRecord>,
}

pub const BUNDLE_DOCS: usize = 20;

/// The bundled sectioned fixture: 20 documents, half members.
pub fn fixture_bundle(seed: u64) -> FixtureBundle {
    let docs = generate_docs(BUNDLE_DOCS, seed);

    let corpus = LabeledCorpus {
        examples: docs
            .iter()
            .map(|d| Example {
                id: d.id.clone(),
                text: d.original(),
                label: d.label,
            })
            .collect(),
    };

    let mut features: BTreeMap<String, SparseFeatureVector> = BTreeMap::new();
    let mut add_features = |spans: &[Span; 2], style: Style| {
        for s in spans {
            let text = s.render(style);
            features.insert(text_sha256(&text), span_features(&s.sentences, &text));
        }
    };

    let mut paraphrases = Vec::new();
    for d in &docs {
        add_features(&d.spans, Style::Original);
        for (n, (markup, spans)) in d.attempts().into_iter().enumerate() {
            if let Some((spans, style)) = spans {
                add_features(spans, style);
            }
            paraphrases.push(ScriptedResponse {
                doc_id: d.id.clone(),
                attempt: n + 1,
                markup,
            });
        }
    }
    let features = features
        .into_iter()
        .map(|(text_sha256, vector)| FeatureRecord { text_sha256, vector })
        .collect();

    let tagging = |d: &GeneratedDoc, structural: bool| {
        let mut anchors = d.anchors();
        if structural {
            let filed_by = d.title.rsplit("filed by ").next().unwrap_or("").trim_end_matches(')');
            if !anchors.iter().any(|a| a.value == filed_by) {
                anchors.push(FactualAnchor::new(filed_by, AnchorKind::Entity));
            }
        }
        let body = serde_json::to_string(&anchors).expect("anchors serialize");
        let mut responses = vec![body];
        // Exercise the schema retry on a few documents.
        if d.id.ends_with('5') {
            responses.insert(0, "Here are the anchors you asked for.".to_owned());
        }
        ScriptedTagging {
            doc_id: d.id.clone(),
            responses,
        }
    };
    let tags_original = docs.iter().map(|d| tagging(d, true)).collect();
    let tags_sage = docs.iter().map(|d| tagging(d, false)).collect();

    let score_runs = [("FT", 0.9, 11), ("SAGE", 0.35, 12), ("SAGE-R", 0.15, 13)]
        .into_iter()
        .map(|(regime, signal, s)| {
            (regime.to_owned(), synthetic_records(&corpus, signal, 0.6, seed.wrapping_add(s)))
        })
        .collect();

    let audit_corpus = LabeledCorpus {
        examples: corpus
            .examples
            .iter()
            .flat_map(|e| {
                ["", "/sage", "/sage-r"].map(|suffix| Example {
                    id: format!("{}{suffix}", e.id),
                    ..e.clone()
                })
            })
            .collect(),
    };
    let audit_records = synthetic_records(&audit_corpus, 0.9, 0.6, seed.wrapping_add(14))
        .into_iter()
        .filter(|r| r.variant == Variant::Original)
        .collect();

    FixtureBundle {
        corpus,
        paraphrases,
        features,
        tags_original,
        tags_sage,
        score_runs,
        audit_records,
    }
}

/// File names used by [`write_fixture_bundle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundlePaths {
    pub corpus: PathBuf,
    pub paraphrases: PathBuf,
    pub features: PathBuf,
    pub tags_original: PathBuf,
    pub tags_sage: PathBuf,
    pub score_runs: Vec<(String, PathBuf)>,
    pub audit_records: PathBuf,
    pub config: PathBuf,
}

fn run_file(regime: &str) -> String {
    format!("scores_{}.jsonl", regime.to_lowercase().replace('-', "_"))
}

/// A pipeline config for the bundle, with paths relative to its directory.
pub fn bundle_config(bundle: &FixtureBundle) -> String {
    let mut s = String::from(
        "# Offline pipeline over the bundled synthetic fixture.\n\
         seed = 0\n\
         parallelism = 4\n\
         \n\
         [paths]\n\
         corpus = \"corpus.jsonl\"\n\
         output = \"out\"\n\
         \n\
         [fixtures]\n\
         paraphrases = \"paraphrases.jsonl\"\n\
         features = \"features.jsonl\"\n\
         tags_original = \"tags_original.jsonl\"\n\
         tags_sage = \"tags_sage.jsonl\"\n\
         \n\
         [defaults]\n\
         max_attempts = 3\n\
         tau_sps = 0.60\n\
         tau_ov = 0.35\n\
         k_percent = 20.0\n\
         fpr_target = 0.01\n",
    );
    for (regime, _) in &bundle.score_runs {
        s.push_str(&format!(
            "\n[[score_runs]]\nregime = \"{regime}\"\ndataset = \"synthetic\"\nrecords = \"{}\"\n",
            run_file(regime)
        ));
    }
    s.push_str(
        "\n[audit]\n\
         records = \"audit_scores.jsonl\"\n\
         attack = \"loss\"\n\
         tau_mia = -2.0\n\
         eps_rob = 0.1\n\
         tau_sps = 0.60\n",
    );
    s
}

/// Writes the bundle and a matching `pipeline.toml` into `dir`.
pub fn write_fixture_bundle(dir: &Path, bundle: &FixtureBundle) -> Result<BundlePaths> {
    let p = |name: &str| dir.join(name);
    let paths = BundlePaths {
        corpus: p("corpus.jsonl"),
        paraphrases: p("paraphrases.jsonl"),
        features: p("features.jsonl"),
        tags_original: p("tags_original.jsonl"),
        tags_sage: p("tags_sage.jsonl"),
        score_runs: bundle
            .score_runs
            .iter()
            .map(|(r, _)| (r.clone(), p(&run_file(r))))
            .collect(),
        audit_records: p("audit_scores.jsonl"),
        config: p("pipeline.toml"),
    };
    jsonl::write(&paths.corpus, &bundle.corpus.examples)?;
    jsonl::write(&paths.paraphrases, &bundle.paraphrases)?;
    jsonl::write(&paths.features, &bundle.features)?;
    jsonl::write(&paths.tags_original, &bundle.tags_original)?;
    jsonl::write(&paths.tags_sage, &bundle.tags_sage)?;
    for ((_, records), (_, path)) in bundle.score_runs.iter().zip(&paths.score_runs) {
        jsonl::write(path, records)?;
    }
    jsonl::write(&paths.audit_records, &bundle.audit_records)?;
    jsonl::write_atomic(&paths.config, bundle_config(bundle).as_bytes())?;
    Ok(paths)
}

/// Parses every bundle document; handy for examples and tests.
pub fn bundle_documents(bundle: &FixtureBundle) -> Result<Vec<Document>> {
    bundle
        .corpus
        .examples
        .iter()
        .map(|e| parse_sectioned_document(&e.id, &e.text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{sps, word_sim, FileFeatureProvider};
    use crate::corpus::narrative_spans;

    #[test]
    fn templates_parse() {
        for t in TEMPLATES {
            let pieces = parse_template(t);
            assert!(pieces.iter().any(|p| matches!(p, Piece::Group(..))));
        }
    }

    #[test]
    fn bundle_is_deterministic() {
        let a = fixture_bundle(0);
        let b = fixture_bundle(0);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.paraphrases, b.paraphrases);
        assert_eq!(a.audit_records, b.audit_records);
        assert_eq!(a.corpus.len(), BUNDLE_DOCS);
        assert_eq!(a.corpus.counts().members, BUNDLE_DOCS / 2);
    }

    #[test]
    fn heavy_rewrites_pass_the_gates_and_light_ones_do_not() {
        let docs = generate_docs(BUNDLE_DOCS, 0);
        let mut records = Vec::new();
        for d in &docs {
            for style in [Style::Original, Style::Light, Style::Heavy] {
                for s in d.spans.iter().chain(&d.drift) {
                    let text = s.render(style);
                    records.push(FeatureRecord {
                        text_sha256: text_sha256(&text),
                        vector: span_features(&s.sentences, &text),
                    });
                }
            }
        }
        let provider = FileFeatureProvider::from_records(records);
        for d in &docs {
            let orig = parse_sectioned_document(&d.id, &d.original()).unwrap();
            let o = narrative_spans(&orig);
            for (style, ok) in [(Style::Heavy, true), (Style::Light, false)] {
                let m = d.markup(&d.spans, style, &d.title);
                let para = parse_sectioned_document(&d.id, &m).unwrap();
                let p = narrative_spans(&para);
                let s = sps(&o, &p, &provider).unwrap();
                let w = o.iter().zip(&p).map(|(a, b)| word_sim(a, b)).sum::<f64>() / 2.0;
                assert_eq!(s >= 0.6 && w <= 0.35, ok, "{} {style:?}: sps {s} wordsim {w}", d.id);
            }
            let drift = parse_sectioned_document(&d.id, &d.markup(&d.drift, Style::Heavy, &d.title)).unwrap();
            let s = sps(&o, &narrative_spans(&drift), &provider).unwrap();
            assert!(s < 0.6, "{} drift sps {s}", d.id);
        }
    }
}
