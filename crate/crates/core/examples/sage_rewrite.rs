//! The bounded rewrite loop: accept a candidate whose meaning is preserved
//! and whose wording diverges, otherwise keep the best one seen.
//!
//! Uses the synthetic fixture's scripted paraphraser and concept-hashed
//! features, so it runs offline.

use mia_audit::metrics::FileFeatureProvider;
use mia_audit::paraphrase::{generate_sage, AttemptOutcome, ParaphraseConfig, ScriptedParaphraser};
use mia_audit::synth::{bundle_documents, fixture_bundle};

fn main() -> mia_audit::Result<()> {
    let bundle = fixture_bundle(0);
    let docs = bundle_documents(&bundle)?;
    let paraphraser = ScriptedParaphraser::new(bundle.paraphrases.clone());
    let features = FileFeatureProvider::from_records(bundle.features.clone());
    let cfg = ParaphraseConfig::default();

    for doc in docs.iter().take(4) {
        let r = generate_sage(doc, &paraphraser, &features, &cfg)?;
        println!("{}: chose attempt {} of {}", doc.id, r.chosen.attempt, r.all_attempts.len());
        for a in &r.all_attempts {
            match &a.outcome {
                AttemptOutcome::Evaluated { candidate } => {
                    let m = candidate.metrics;
                    println!(
                        "  #{} sps {:.3} wordsim {:.3} utility {:+.3}",
                        a.attempt, m.sps, m.wordsim, m.utility
                    );
                }
                AttemptOutcome::Unevaluable { reason } => println!("  #{} unevaluable: {reason}", a.attempt),
            }
        }
    }
    println!("paraphraser calls: {}", paraphraser.calls());
    Ok(())
}
