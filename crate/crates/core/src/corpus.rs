//! Sectioned documents and labeled member/nonmember corpora.
//!
//! Document markup is a flat sequence of
//! `<section type="structure">...</section>` and
//! `<section type="narrative">...</section>` blocks. Bodies are kept
//! byte-exact together with their offsets into the raw input, so a parsed
//! document renders back to the identical bytes.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

const OPEN: &str = "<section";
const CLOSE: &str = "</section>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Structural,
    Narrative,
}

impl SectionKind {
    /// Value of the `type` attribute in markup.
    pub fn tag_value(self) -> &'static str {
        match self {
            SectionKind::Structural => "structure",
            SectionKind::Narrative => "narrative",
        }
    }

    fn from_tag_value(v: &str) -> Option<Self> {
        match v {
            "structure" => Some(SectionKind::Structural),
            "narrative" => Some(SectionKind::Narrative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub kind: SectionKind,
    pub text: String,
    pub index: usize,
    /// Byte range of the body inside [`Document::raw`].
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sections: Vec<Section>,
    pub raw: String,
}

impl Document {
    pub fn narrative_count(&self) -> usize {
        self.sections
            .iter()
            .filter(|s| s.kind == SectionKind::Narrative)
            .count()
    }

    pub fn structural(&self) -> impl Iterator<Item = &Section> {
        self.sections
            .iter()
            .filter(|s| s.kind == SectionKind::Structural)
    }

    /// Rebuilds markup from the section bodies and the bytes of `raw` that
    /// lie outside every body.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.raw.len());
        let mut cursor = 0;
        for s in &self.sections {
            out.push_str(&self.raw[cursor..s.span.start]);
            out.push_str(&s.text);
            cursor = s.span.end;
        }
        out.push_str(&self.raw[cursor..]);
        out
    }

    /// Returns a copy with every section body replaced by `f(section)`,
    /// keeping tags and inter-section bytes intact.
    pub fn map_sections(&self, mut f: impl FnMut(&Section) -> String) -> Document {
        let mut raw = String::with_capacity(self.raw.len());
        let mut sections = Vec::with_capacity(self.sections.len());
        let mut cursor = 0;
        for s in &self.sections {
            raw.push_str(&self.raw[cursor..s.span.start]);
            let text = f(s);
            let start = raw.len();
            raw.push_str(&text);
            sections.push(Section {
                kind: s.kind,
                index: s.index,
                span: start..raw.len(),
                text,
            });
            cursor = s.span.end;
        }
        raw.push_str(&self.raw[cursor..]);
        Document {
            id: self.id.clone(),
            sections,
            raw,
        }
    }

    /// Canonical markup for `sections`, one tag block per line.
    pub fn markup_from(sections: &[(SectionKind, &str)]) -> String {
        let mut out = String::new();
        for (i, (kind, text)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!(
                "<section type=\"{}\">{}</section>",
                kind.tag_value(),
                text
            ));
        }
        out
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses the open tag starting at `start` (which points at `<section`).
/// Returns the section kind and the offset just past `>`.
fn parse_open_tag(raw: &str, start: usize) -> Result<(SectionKind, usize)> {
    let bytes = raw.as_bytes();
    let mut i = start + OPEN.len();
    let skip_ws = |mut i: usize| {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        i
    };

    let after_name = skip_ws(i);
    if after_name == i {
        return match bytes.get(i) {
            Some(b'>') => Err(parse_err(start, "section tag missing type attribute")),
            None => Err(parse_err(start, "unclosed section tag")),
            _ => Err(parse_err(start, "malformed section tag")),
        };
    }
    i = after_name;

    let mut kind = None;
    loop {
        match bytes.get(i) {
            None => return Err(parse_err(start, "unclosed section tag")),
            Some(b'>') => break,
            Some(_) => {}
        }
        let name_start = i;
        while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'-' || bytes[i] == b'_') {
            i += 1;
        }
        let name = &raw[name_start..i];
        if name.is_empty() {
            return Err(parse_err(i, "malformed section tag"));
        }
        if name != "type" {
            return Err(parse_err(name_start, format!("unsupported attribute {name:?}")));
        }
        if kind.is_some() {
            return Err(parse_err(name_start, "duplicate type attribute"));
        }
        if bytes.get(i) != Some(&b'=') || bytes.get(i + 1) != Some(&b'"') {
            return Err(parse_err(i, "expected =\"...\" after attribute name"));
        }
        let value_start = i + 2;
        let value_end = raw[value_start..]
            .find('"')
            .map(|o| value_start + o)
            .ok_or_else(|| parse_err(value_start, "unterminated attribute value"))?;
        let value = &raw[value_start..value_end];
        kind = Some(
            SectionKind::from_tag_value(value)
                .ok_or_else(|| parse_err(value_start, format!("unknown section type {value:?}")))?,
        );
        i = value_end + 1;
        let next = skip_ws(i);
        if next == i && !matches!(bytes.get(i), Some(b'>') | None) {
            return Err(parse_err(i, "malformed section tag"));
        }
        i = next;
    }
    let kind = kind.ok_or_else(|| parse_err(start, "section tag missing type attribute"))?;
    Ok((kind, i + 1))
}

/// Parses sectioned markup into a [`Document`].
///
/// Input without any section tag becomes a single narrative section. When
/// tags are present, non-whitespace text between them becomes its own
/// narrative section; whitespace between tags is kept only in `raw`.
pub fn parse_sectioned_document(id: &str, raw: &str) -> Result<Document> {
    if raw.trim().is_empty() {
        return Err(parse_err(0, "empty input"));
    }

    let mut sections = Vec::new();
    let mut push = |kind, span: Range<usize>| {
        let index = sections.len();
        sections.push(Section {
            kind,
            text: raw[span.clone()].to_owned(),
            index,
            span,
        });
    };

    let mut cursor = 0;
    loop {
        let next_open = raw[cursor..].find(OPEN).map(|o| cursor + o);
        let next_close = raw[cursor..].find(CLOSE).map(|o| cursor + o);
        if let Some(close) = next_close {
            if next_open.is_none_or(|open| close < open) {
                return Err(parse_err(close, "closing tag without matching open tag"));
            }
        }
        let Some(open) = next_open else {
            break;
        };

        if !raw[cursor..open].trim().is_empty() {
            push(SectionKind::Narrative, cursor..open);
        }

        let (kind, body_start) = parse_open_tag(raw, open)?;
        let close = raw[body_start..]
            .find(CLOSE)
            .map(|o| body_start + o)
            .ok_or_else(|| parse_err(open, "unclosed section"))?;
        if let Some(nested) = raw[body_start..close].find(OPEN) {
            return Err(parse_err(body_start + nested, "nested section tag"));
        }
        push(kind, body_start..close);
        cursor = close + CLOSE.len();
    }

    if !raw[cursor..].trim().is_empty() {
        push(SectionKind::Narrative, cursor..raw.len());
    }

    Ok(Document {
        id: id.to_owned(),
        sections,
        raw: raw.to_owned(),
    })
}

/// Narrative bodies of `doc`, in order.
pub fn narrative_spans(doc: &Document) -> Vec<&str> {
    doc.sections
        .iter()
        .filter(|s| s.kind == SectionKind::Narrative)
        .map(|s| s.text.as_str())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    Nonmember,
}

impl Label {
    pub fn is_member(self) -> bool {
        self == Label::Member
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "member" => Some(Label::Member),
            "nonmember" => Some(Label::Nonmember),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Member => "member",
            Label::Nonmember => "nonmember",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub members: usize,
    pub nonmembers: usize,
}

impl LabeledCorpus {
    /// Builds a corpus, rejecting duplicate ids.
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        let members = self.examples.iter().filter(|e| e.label.is_member()).count();
        LabelCounts {
            members,
            nonmembers: self.examples.len() - members,
        }
    }

    pub fn require_both_labels(&self) -> Result<()> {
        let c = self.counts();
        if c.members == 0 || c.nonmembers == 0 {
            return Err(Error::SingleLabel);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }
}

#[derive(Deserialize)]
struct RawExample {
    id: String,
    text: String,
    label: String,
}

/// Loads a line-delimited `{id, text, label}` corpus file.
pub fn load_labeled_corpus(path: &Path) -> Result<LabeledCorpus> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record_err = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample =
            serde_json::from_str(line).map_err(|e| record_err(line_no, e.to_string()))?;
        let label = Label::parse(&raw.label)
            .ok_or_else(|| record_err(line_no, format!("unknown label {:?}", raw.label)))?;
        if !seen.insert(raw.id.clone()) {
            return Err(record_err(line_no, Error::DuplicateId(raw.id).to_string()));
        }
        examples.push(Example {
            id: raw.id,
            text: raw.text,
            label,
        });
    }
    let corpus = LabeledCorpus { examples };
    let c = corpus.counts();
    tracing::info!(members = c.members, nonmembers = c.nonmembers, "loaded corpus");
    Ok(corpus)
}

pub fn write_labeled_corpus(path: &Path, corpus: &LabeledCorpus) -> Result<()> {
    jsonl::write(path, &corpus.examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) const FIG2: &str = "<section type=\"structure\">Description</section>\n\
<section type=\"narrative\">Using pdfbox, I produced a PDF/A-2b document and found that the font subset is wrong.</section>\n\
<section type=\"structure\">Specification: ISO 19005-2:2011, Clause: 6.2.11.4, Test number: 4</section>\n\
<section type=\"narrative\">Specifically, certain CIDs included in the CIDToGidMap are absent from the CIDSet.</section>";

    #[test]
    fn four_section_markup() {
        let doc = parse_sectioned_document("fig2", FIG2).unwrap();
        let kinds: Vec<_> = doc.sections.iter().map(|s| s.kind).collect();
        use SectionKind::*;
        assert_eq!(kinds, [Structural, Narrative, Structural, Narrative]);
        assert_eq!(doc.sections[0].text, "Description");
        assert!(doc.sections.iter().enumerate().all(|(i, s)| s.index == i));
        assert_eq!(doc.render(), FIG2);
        for s in &doc.sections {
            assert_eq!(&doc.raw[s.span.clone()], s.text);
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            parse_sectioned_document("e", ""),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn untagged_fallback() {
        let doc = parse_sectioned_document("p", "plain prose, no tags").unwrap();
        assert_eq!(doc.sections.len(), 1);
        assert_eq!(doc.sections[0].kind, SectionKind::Narrative);
        assert_eq!(narrative_spans(&doc), vec!["plain prose, no tags"]);
    }

    #[test]
    fn malformed_tags_name_offsets() {
        let cases = [
            ("<section type=\"narrative\">never closed", 0),
            ("ok <section type=\"structure\">x</section></section>", 40),
            ("<section type=\"narrative\" lang=\"en\">x</section>", 26),
            ("<section type=\"heading\">x</section>", 15),
            ("<section>x</section>", 0),
            ("<section type=\"narrative\">a <section type=\"narrative\">b</section>", 28),
            ("<section type=\"narrative\"", 0),
        ];
        for (raw, want) in cases {
            match parse_sectioned_document("m", raw) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, want, "{raw}"),
                other => panic!("{raw}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn stray_text_between_tags_is_narrative() {
        let raw = "<section type=\"structure\">H</section>\nloose prose\n<section type=\"narrative\">b</section>";
        let doc = parse_sectioned_document("s", raw).unwrap();
        assert_eq!(doc.sections.len(), 3);
        assert_eq!(doc.sections[1].kind, SectionKind::Narrative);
        assert_eq!(doc.sections[1].text, "\nloose prose\n");
        assert_eq!(doc.render(), raw);
    }

    #[test]
    fn narrative_spans_of_structural_only() {
        let doc = parse_sectioned_document(
            "s",
            "<section type=\"structure\">a</section><section type=\"structure\">b</section>",
        )
        .unwrap();
        assert!(narrative_spans(&doc).is_empty());
        let fig = parse_sectioned_document("f", FIG2).unwrap();
        let spans = narrative_spans(&fig);
        assert_eq!(spans.len(), 2);
        assert!(spans[0].starts_with("Using pdfbox"));
        assert!(spans[1].starts_with("Specifically"));
    }

    #[test]
    fn map_sections_keeps_offsets_consistent() {
        let doc = parse_sectioned_document("f", FIG2).unwrap();
        let upper = doc.map_sections(|s| s.text.to_uppercase());
        for s in &upper.sections {
            assert_eq!(&upper.raw[s.span.clone()], s.text);
        }
        let reparsed = parse_sectioned_document("f", &upper.raw).unwrap();
        assert_eq!(reparsed, upper);
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn corpus_minimal_file() {
        let f = write_tmp(
            "{\"id\":\"a\",\"text\":\"x\",\"label\":\"member\"}\n{\"id\":\"b\",\"text\":\"y\",\"label\":\"nonmember\"}\n",
        );
        let c = load_labeled_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(
            c.counts(),
            LabelCounts {
                members: 1,
                nonmembers: 1
            }
        );
        c.require_both_labels().unwrap();
    }

    #[test]
    fn corpus_bad_label_names_line() {
        let f = write_tmp(
            "{\"id\":\"a\",\"text\":\"x\",\"label\":\"member\"}\n{\"id\":\"b\",\"text\":\"y\",\"label\":\"maybe\"}\n",
        );
        match load_labeled_corpus(f.path()) {
            Err(Error::Record { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("maybe"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_duplicate_id() {
        let f = write_tmp(
            "{\"id\":\"a\",\"text\":\"x\",\"label\":\"member\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"nonmember\"}\n",
        );
        let err = load_labeled_corpus(f.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn corpus_unparseable_line() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"x\",\"label\":\"member\"}\n{not json\n");
        assert!(matches!(
            load_labeled_corpus(f.path()),
            Err(Error::Record { line: 2, .. })
        ));
    }

    #[test]
    fn single_label_rejected_for_evaluation() {
        let c = LabeledCorpus::new(vec![Example {
            id: "a".into(),
            text: "t".into(),
            label: Label::Member,
        }])
        .unwrap();
        assert!(matches!(c.require_both_labels(), Err(Error::SingleLabel)));
    }
}
