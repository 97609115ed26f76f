//! Run every membership-inference attack over token scores and report AUC
//! and TPR at 1% FPR.

use std::collections::BTreeMap;

use mia_audit::eval::{auc, tpr_at_fpr, ScoredExample};
use mia_audit::scoring::{run_attacks, AttackConfig, AttackKind, RecordSet};
use mia_audit::synth::{fixture_bundle, permuted_fixture};

fn report(title: &str, corpus: &mia_audit::corpus::LabeledCorpus, records: RecordSet) -> mia_audit::Result<()> {
    let run = run_attacks(corpus, &records, &AttackConfig::default())?;
    let mut by_attack: BTreeMap<AttackKind, Vec<ScoredExample>> = BTreeMap::new();
    for s in run.scores {
        let label = corpus.get(&s.id).expect("scored id is in corpus").label;
        by_attack.entry(s.attack).or_default().push(ScoredExample {
            id: s.id,
            attack: s.attack,
            score: s.score,
            label,
        });
    }
    println!("{title}");
    for (attack, ex) in &by_attack {
        println!("  {:<13} AUC {:.3}  TPR@1% {:.3}", attack.display_name(), auc(ex)?, tpr_at_fpr(ex, 0.01)?);
    }
    for (attack, why) in &run.unavailable {
        println!("  {:<13} unavailable: {why}", attack.display_name());
    }
    Ok(())
}

fn main() -> mia_audit::Result<()> {
    let bundle = fixture_bundle(0);
    for (regime, records) in &bundle.score_runs {
        report(regime, &bundle.corpus, RecordSet::new(records.clone())?)?;
    }
    let (corpus, records) = permuted_fixture(400, 0);
    report("shuffled labels", &corpus, RecordSet::new(records)?)
}
