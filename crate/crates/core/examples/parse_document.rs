//! Parse sectioned markup and inspect its structural and narrative parts.

use mia_audit::corpus::{narrative_spans, parse_sectioned_document, SectionKind};

const MARKUP: &str = r#"<section type="structure"># Quarterly note</section>
<section type="narrative">Revenue at Halden Works rose 12% in March 2021.</section>
<section type="structure">## Outlook</section>
<section type="narrative">The board expects a second plant by 2023.</section>"#;

fn main() -> mia_audit::Result<()> {
    let doc = parse_sectioned_document("note-1", MARKUP)?;
    for s in &doc.sections {
        let tag = match s.kind {
            SectionKind::Structural => "S",
            SectionKind::Narrative => "N",
        };
        println!("[{tag}{}] bytes {:?}: {}", s.index, s.span, s.text);
    }
    println!("narrative spans: {:?}", narrative_spans(&doc));

    // Rendering is lossless for well-formed input.
    assert_eq!(parse_sectioned_document("note-1", &doc.render())?.sections, doc.sections);

    // Malformed markup reports a byte offset.
    match parse_sectioned_document("bad", "<section type=\"narrative\">unterminated") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
