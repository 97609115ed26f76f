//! Replace factual anchors with numbered placeholders, both in a flattened
//! rewrite and in place inside the original markup.

use mia_audit::corpus::parse_sectioned_document;
use mia_audit::redaction::{build_ft_f, build_sage_r, extract_facts, ScriptedTagger, ScriptedTagging};

const MARKUP: &str = r#"<section type="structure"># Note from Halden Works</section>
<section type="narrative">Halden Works hired 40 people in March 2021.</section>
<section type="narrative">By 2023 Halden Works plans a second site.</section>"#;

fn main() -> mia_audit::Result<()> {
    let doc = parse_sectioned_document("note-1", MARKUP)?;
    // The first reply is not JSON; the tagger is asked again.
    let tagger = ScriptedTagger::new([ScriptedTagging {
        doc_id: "note-1".into(),
        responses: vec![
            "Sure! Here are the facts.".into(),
            r#"[{"value":"Halden Works","type":"entity"},{"value":"40","type":"number"},
                {"value":"March 2021","type":"date"},{"value":"2023","type":"date"}]"#
                .into(),
        ],
    }]);
    let anchors = extract_facts(&doc, &tagger, 3)?;
    println!("{} anchors after {} tagger calls", anchors.len(), tagger.calls());

    let sage_r = build_sage_r(&doc, &anchors)?;
    println!("flattened:\n{}\n", sage_r.text);

    let ft_f = build_ft_f(&doc, &anchors);
    println!("in place:\n{}", ft_f.text);
    for a in &ft_f.plan.assignments {
        println!("  {} <- {:?}", a.placeholder, a.anchor.value);
    }
    Ok(())
}
