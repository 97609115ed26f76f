//! Factual-anchor tagging and deterministic placeholder substitution.
//!
//! Anchors (entities, numbers, dates) come from an external tagger as
//! strict JSON. They are numbered `<<FACT_1>>`, `<<FACT_2>>`, ... by first
//! occurrence in the prose and every exact occurrence is replaced. Longer
//! anchors claim their bytes before shorter ones, so placeholders never
//! nest.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::corpus::{narrative_spans, Document};
use crate::error::{Error, Result};
use crate::jsonl;

pub const SIGIL: &str = "<<";
const PLACEHOLDER_PREFIX: &str = "<<FACT_";
const PLACEHOLDER_SUFFIX: &str = ">>";
pub const DEFAULT_TAGGER_BUDGET: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Entity,
    Number,
    Date,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactualAnchor {
    pub value: String,
    #[serde(rename = "type")]
    pub kind: AnchorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl FactualAnchor {
    pub fn new(value: impl Into<String>, kind: AnchorKind) -> Self {
        Self {
            value: value.into(),
            kind,
            notes: None,
        }
    }
}

pub fn placeholder(i: usize) -> String {
    format!("{PLACEHOLDER_PREFIX}{i}{PLACEHOLDER_SUFFIX}")
}

/// Byte ranges of every `<<FACT_n>>` token in `text`, in order.
pub fn placeholder_spans(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(off) = text[from..].find(PLACEHOLDER_PREFIX) {
        let start = from + off;
        let digits_start = start + PLACEHOLDER_PREFIX.len();
        let digits = text[digits_start..]
            .bytes()
            .take_while(u8::is_ascii_digit)
            .count();
        let end = digits_start + digits;
        if digits > 0 && text[end..].starts_with(PLACEHOLDER_SUFFIX) {
            let end = end + PLACEHOLDER_SUFFIX.len();
            out.push(start..end);
            from = end;
        } else {
            from = start + 1;
        }
    }
    out
}

/// External anchor tagger. Returns the raw response body, validated by
/// [`extract_facts`].
pub trait Tagger: Send + Sync {
    fn tag(&self, doc: &Document) -> Result<String>;
}

impl<T: Tagger + ?Sized> Tagger for &T {
    fn tag(&self, doc: &Document) -> Result<String> {
        (**self).tag(doc)
    }
}

/// Validates a tagger response: a JSON array of `{value, type, notes?}`.
/// A single surrounding markdown code fence is tolerated.
pub fn parse_tagger_response(body: &str) -> Result<Vec<FactualAnchor>> {
    let mut s = body.trim();
    if let Some(rest) = s.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        s = rest
            .strip_suffix("```")
            .ok_or_else(|| Error::invalid("unterminated code fence"))?
            .trim();
    }
    let anchors: Vec<FactualAnchor> = serde_json::from_str(s)?;
    if let Some(a) = anchors.iter().find(|a| a.value.is_empty()) {
        return Err(Error::invalid(format!("empty anchor value ({:?})", a.kind)));
    }
    Ok(anchors)
}

/// Requests anchors for `doc`, re-requesting on schema violations up to
/// `budget` times. Anchors containing the placeholder sigil are dropped.
pub fn extract_facts(doc: &Document, tagger: &dyn Tagger, budget: usize) -> Result<Vec<FactualAnchor>> {
    let mut last = String::from("no attempts made");
    for attempt in 1..=budget.max(1) {
        let body = tagger.tag(doc)?;
        match parse_tagger_response(&body) {
            Ok(anchors) => {
                return Ok(anchors
                    .into_iter()
                    .filter(|a| {
                        let ok = !a.value.contains(SIGIL);
                        if !ok {
                            tracing::warn!(doc = %doc.id, value = %a.value, "anchor contains placeholder sigil, dropped");
                        }
                        ok
                    })
                    .collect());
            }
            Err(e) => {
                tracing::debug!(doc = %doc.id, attempt, error = %e, "tagger response rejected");
                last = e.to_string();
            }
        }
    }
    Err(Error::TaggerExhausted {
        attempts: budget.max(1),
        last,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub anchor: FactualAnchor,
    pub placeholder: String,
    /// Byte offset of the first occurrence in the prose used for ordering.
    pub first_offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionPlan {
    pub assignments: Vec<Assignment>,
}

impl RedactionPlan {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }
}

/// Numbers the anchors that occur in `prose` by first occurrence.
///
/// Duplicate values collapse to their first listing. Anchors starting at the
/// same offset are ordered longest first.
pub fn assign_placeholders(prose: &str, anchors: &[FactualAnchor]) -> RedactionPlan {
    plan_with_fallback(prose, None, anchors)
}

/// Like [`assign_placeholders`], but anchors absent from `prose` and present
/// in `rest` are numbered after the others by their offset in `rest`.
fn plan_with_fallback(prose: &str, rest: Option<&str>, anchors: &[FactualAnchor]) -> RedactionPlan {
    let mut seen = HashSet::new();
    let mut located: Vec<(u8, usize, &FactualAnchor)> = Vec::new();
    for a in anchors {
        if a.value.is_empty() || !seen.insert(a.value.as_str()) {
            continue;
        }
        if let Some(off) = prose.find(&a.value) {
            located.push((0, off, a));
        } else if let Some(off) = rest.and_then(|r| r.find(&a.value)) {
            located.push((1, off, a));
        }
    }
    located.sort_by(|x, y| {
        (x.0, x.1)
            .cmp(&(y.0, y.1))
            .then_with(|| y.2.value.len().cmp(&x.2.value.len()))
            .then_with(|| x.2.value.cmp(&y.2.value))
    });
    RedactionPlan {
        assignments: located
            .into_iter()
            .enumerate()
            .map(|(i, (_, off, a))| Assignment {
                anchor: a.clone(),
                placeholder: placeholder(i + 1),
                first_offset: off,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactedDocument {
    pub text: String,
    /// Byte ranges of every placeholder token in `text`.
    pub mask_spans: Vec<Range<usize>>,
    pub plan: RedactionPlan,
}

fn overlaps(claimed: &[Range<usize>], r: &Range<usize>) -> bool {
    claimed.iter().any(|c| c.start < r.end && r.start < c.end)
}

/// Replaces every exact occurrence of each planned anchor in `text`.
///
/// Placeholder tokens already present are left alone, which makes the
/// substitution idempotent.
pub fn apply_redaction(text: &str, plan: &RedactionPlan) -> RedactedDocument {
    let mut claimed: Vec<Range<usize>> = placeholder_spans(text);
    let mut replacements: Vec<(Range<usize>, &str)> = Vec::new();

    let mut order: Vec<&Assignment> = plan.assignments.iter().collect();
    order.sort_by(|a, b| {
        b.anchor
            .value
            .len()
            .cmp(&a.anchor.value.len())
            .then(a.first_offset.cmp(&b.first_offset))
    });

    for a in order {
        let value = a.anchor.value.as_str();
        if value.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(off) = text[from..].find(value) {
            let start = from + off;
            let r = start..start + value.len();
            if !overlaps(&claimed, &r) {
                claimed.push(r.clone());
                replacements.push((r, a.placeholder.as_str()));
            }
            from = start + text[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    replacements.sort_by_key(|(r, _)| r.start);

    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for (r, ph) in &replacements {
        out.push_str(&text[cursor..r.start]);
        out.push_str(ph);
        cursor = r.end;
    }
    out.push_str(&text[cursor..]);

    RedactedDocument {
        mask_spans: placeholder_spans(&out),
        text: out,
        plan: plan.clone(),
    }
}

/// Narrative sections, trimmed and joined by a blank line.
pub fn flatten_narrative(doc: &Document) -> String {
    narrative_spans(doc)
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Drops structural sections, flattens the narrative and substitutes
/// anchors.
pub fn build_sage_r(sage_doc: &Document, anchors: &[FactualAnchor]) -> Result<RedactedDocument> {
    if sage_doc.narrative_count() == 0 {
        return Err(Error::invalid(format!(
            "document {:?} has no narrative section",
            sage_doc.id
        )));
    }
    let prose = flatten_narrative(sage_doc);
    let plan = assign_placeholders(&prose, anchors);
    Ok(apply_redaction(&prose, &plan))
}

/// Substitutes anchors in the original document in place, keeping every
/// section and tag.
///
/// Numbering follows the narrative prose; anchors found only in structural
/// sections are numbered after those.
pub fn build_ft_f(original: &Document, anchors: &[FactualAnchor]) -> RedactedDocument {
    let prose = narrative_spans(original).join("\n\n");
    let all_bodies: String = original
        .sections
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    let plan = plan_with_fallback(&prose, Some(&all_bodies), anchors);
    let redacted = original.map_sections(|s| apply_redaction(&s.text, &plan).text);
    RedactedDocument {
        mask_spans: placeholder_spans(&redacted.raw),
        text: redacted.raw,
        plan,
    }
}

/// One line of a redacted-output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactedRecord {
    pub id: String,
    pub text: String,
    pub mask_spans: Vec<Range<usize>>,
    pub plan: RedactionPlan,
}

impl RedactedRecord {
    pub fn new(id: impl Into<String>, doc: RedactedDocument) -> Self {
        Self {
            id: id.into(),
            text: doc.text,
            mask_spans: doc.mask_spans,
            plan: doc.plan,
        }
    }
}

/// One line of a scripted tagger fixture. `responses` are replayed in call
/// order; the last one repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTagging {
    pub doc_id: String,
    pub responses: Vec<String>,
}

#[derive(Debug, Default)]
pub struct ScriptedTagger {
    responses: HashMap<String, Vec<String>>,
    per_doc_calls: std::sync::Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl ScriptedTagger {
    pub fn new(entries: impl IntoIterator<Item = ScriptedTagging>) -> Self {
        Self {
            responses: entries
                .into_iter()
                .map(|e| (e.doc_id, e.responses))
                .collect(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(jsonl::read::<ScriptedTagging>(path)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Tagger for ScriptedTagger {
    fn tag(&self, doc: &Document) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let Some(list) = self.responses.get(&doc.id).filter(|l| !l.is_empty()) else {
            return Ok("[]".to_owned());
        };
        let mut calls = self.per_doc_calls.lock().expect("tagger call map poisoned");
        let n = calls.entry(doc.id.clone()).or_insert(0);
        let body = list[(*n).min(list.len() - 1)].clone();
        *n += 1;
        Ok(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_sectioned_document;

    const FIG2: &str = "<section type=\"structure\">Description</section>\n\
<section type=\"narrative\">Using pdfbox, I produced a PDF/A-2b document and ...</section>\n\
<section type=\"structure\">Specification: ISO 19005-2:2011, Clause: 6.2.11.4, Test number: 4</section>\n\
<section type=\"narrative\">Specifically, certain CIDs included in the CIDToGidMap are absent from the CIDSet.</section>";

    fn entity(v: &str) -> FactualAnchor {
        FactualAnchor::new(v, AnchorKind::Entity)
    }

    fn fig2_tags() -> String {
        r#"[{"value":"pdfbox","type":"entity"},{"value":"PDF/A-2b","type":"entity","notes":"format"},{"value":"CIDToGidMap","type":"entity"},{"value":"CIDSet","type":"entity"}]"#.to_owned()
    }

    #[test]
    fn fig2_extraction_and_sage_r() {
        let doc = parse_sectioned_document("fig2", FIG2).unwrap();
        let tagger = ScriptedTagger::new([ScriptedTagging {
            doc_id: "fig2".into(),
            responses: vec![fig2_tags()],
        }]);
        let anchors = extract_facts(&doc, &tagger, 3).unwrap();
        assert_eq!(anchors.len(), 4);
        assert!(anchors.iter().all(|a| a.kind == AnchorKind::Entity));

        let r = build_sage_r(&doc, &anchors).unwrap();
        assert_eq!(
            r.text,
            "Using <<FACT_1>>, I produced a <<FACT_2>> document and ...\n\n\
Specifically, certain CIDs included in the <<FACT_3>> are absent from the <<FACT_4>>."
        );
        assert!(!r.text.contains("Description"));
        assert!(!r.text.contains("ISO 19005"));
        assert_eq!(r.mask_spans.len(), 4);
        for (span, i) in r.mask_spans.iter().zip(1..) {
            assert_eq!(&r.text[span.clone()], placeholder(i));
        }
    }

    #[test]
    fn plan_orders_by_first_occurrence() {
        let prose = "Using pdfbox, certain CIDs are absent from the CIDSet.";
        let plan = assign_placeholders(prose, &[entity("CIDSet"), entity("pdfbox")]);
        assert_eq!(plan.assignments[0].anchor.value, "pdfbox");
        assert_eq!(plan.assignments[0].placeholder, "<<FACT_1>>");
        assert_eq!(plan.assignments[1].anchor.value, "CIDSet");
        assert_eq!(plan.assignments[1].placeholder, "<<FACT_2>>");
    }

    #[test]
    fn plan_drops_absent_and_dedups() {
        let plan = assign_placeholders(
            "alpha beta",
            &[entity("gamma"), entity("beta"), entity("alpha"), entity("beta")],
        );
        let values: Vec<_> = plan.assignments.iter().map(|a| a.anchor.value.as_str()).collect();
        assert_eq!(values, ["alpha", "beta"]);
        assert_eq!(plan.assignments[1].placeholder, "<<FACT_2>>");
    }

    #[test]
    fn all_occurrences_replaced() {
        let plan = assign_placeholders("pdfbox and pdfbox", &[entity("pdfbox")]);
        let r = apply_redaction("pdfbox and pdfbox", &plan);
        assert_eq!(r.text, "<<FACT_1>> and <<FACT_1>>");
        assert_eq!(r.mask_spans, vec![0..10, 15..25]);
    }

    #[test]
    fn empty_plan_is_identity() {
        let r = apply_redaction("nothing here", &RedactionPlan::default());
        assert_eq!(r.text, "nothing here");
        assert!(r.mask_spans.is_empty());
    }

    #[test]
    fn longer_anchor_wins_overlap() {
        let text = "Conforms to ISO 19005-2:2011 since 2011.";
        let anchors = [FactualAnchor::new("2011", AnchorKind::Date), entity("ISO 19005-2:2011")];
        let plan = assign_placeholders(text, &anchors);
        let r = apply_redaction(text, &plan);
        assert_eq!(r.text, "Conforms to <<FACT_1>> since <<FACT_2>>.");
        assert!(!r.text.contains("2011"));
    }

    #[test]
    fn anchor_matching_placeholder_text_is_idempotent() {
        let plan = assign_placeholders("FACT and pdfbox", &[entity("pdfbox"), entity("FACT")]);
        let once = apply_redaction("FACT and pdfbox", &plan);
        assert_eq!(once.text, "<<FACT_1>> and <<FACT_2>>");
        let twice = apply_redaction(&once.text, &plan);
        assert_eq!(twice, once);
    }

    #[test]
    fn tagger_retries_then_succeeds() {
        let doc = parse_sectioned_document("d", "plain").unwrap();
        let tagger = ScriptedTagger::new([ScriptedTagging {
            doc_id: "d".into(),
            responses: vec![
                "not json".into(),
                r#"[{"value":"x","type":"planet"}]"#.into(),
                r#"[{"value":"plain","type":"entity"}]"#.into(),
            ],
        }]);
        let a = extract_facts(&doc, &tagger, 3).unwrap();
        assert_eq!(a, vec![entity("plain")]);
        assert_eq!(tagger.calls(), 3);
    }

    #[test]
    fn tagger_exhaustion() {
        let doc = parse_sectioned_document("d", "plain").unwrap();
        let tagger = ScriptedTagger::new([ScriptedTagging {
            doc_id: "d".into(),
            responses: vec![r#"{"value":"x"}"#.into()],
        }]);
        assert!(matches!(
            extract_facts(&doc, &tagger, 3),
            Err(Error::TaggerExhausted { attempts: 3, .. })
        ));
        assert_eq!(tagger.calls(), 3);
    }

    #[test]
    fn no_entities_gives_empty_list() {
        let doc = parse_sectioned_document("d", "plain").unwrap();
        let tagger = ScriptedTagger::default();
        assert!(extract_facts(&doc, &tagger, 3).unwrap().is_empty());
    }

    #[test]
    fn sigil_anchors_dropped() {
        let doc = parse_sectioned_document("d", "plain").unwrap();
        let tagger = ScriptedTagger::new([ScriptedTagging {
            doc_id: "d".into(),
            responses: vec![r#"[{"value":"<<x","type":"entity"},{"value":"plain","type":"entity"}]"#.into()],
        }]);
        assert_eq!(extract_facts(&doc, &tagger, 3).unwrap(), vec![entity("plain")]);
    }

    #[test]
    fn code_fence_tolerated_extra_fields_rejected() {
        assert_eq!(
            parse_tagger_response("```json\n[{\"value\":\"a\",\"type\":\"number\"}]\n```").unwrap(),
            vec![FactualAnchor::new("a", AnchorKind::Number)]
        );
        assert!(parse_tagger_response(r#"[{"value":"a","type":"number","score":1}]"#).is_err());
        assert!(parse_tagger_response(r#"[{"value":"","type":"number"}]"#).is_err());
    }

    #[test]
    fn ft_f_keeps_structure() {
        let doc = parse_sectioned_document("fig2", FIG2).unwrap();
        let anchors = [entity("pdfbox"), entity("CIDSet"), entity("ISO 19005-2:2011")];
        let r = build_ft_f(&doc, &anchors);
        let reparsed = parse_sectioned_document("fig2", &r.text).unwrap();
        assert_eq!(reparsed.sections.len(), 4);
        assert_eq!(reparsed.sections[0].text, "Description");
        assert!(reparsed.sections[1].text.contains("<<FACT_1>>"));
        assert!(reparsed.sections[3].text.ends_with("the <<FACT_2>>."));
        // Only in a structural section: numbered after the narrative anchors.
        assert!(reparsed.sections[2].text.contains("<<FACT_3>>"));

        let again = build_ft_f(&reparsed, &anchors);
        assert_eq!(again.text, r.text);
        assert_eq!(again.mask_spans, r.mask_spans);
    }

    #[test]
    fn ft_f_without_facts_is_byte_identical() {
        let doc = parse_sectioned_document("fig2", FIG2).unwrap();
        let r = build_ft_f(&doc, &[]);
        assert_eq!(r.text, FIG2);
        assert!(r.mask_spans.is_empty());
    }

    #[test]
    fn sage_r_requires_narrative() {
        let doc = parse_sectioned_document("s", "<section type=\"structure\">x</section>").unwrap();
        assert!(build_sage_r(&doc, &[]).is_err());
        let plain = parse_sectioned_document("p", "just prose").unwrap();
        let r = build_sage_r(&plain, &[]).unwrap();
        assert_eq!(r.text, "just prose");
        assert!(r.plan.is_empty());
    }
}
