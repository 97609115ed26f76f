//! Decide membership for a suspect text and check whether the decision
//! survives meaning-preserving transformations.

use mia_audit::protocol::{audit, semantic_equivalent, AuditConfig};

fn main() -> mia_audit::Result<()> {
    let cfg = AuditConfig {
        tau_mia: 0.5,
        eps_rob: 0.1,
        tau_sps: 0.6,
        eps_util: Some(0.2),
    };
    let eq = semantic_equivalent(0.82, Some(0.05), &cfg)?;
    println!("rewrite equivalent: {} ({:?})", eq.equivalent, eq.utility);

    // Scores move by at most 0.05 while the original sits 0.2 from the
    // threshold: the decision cannot flip.
    let robust = audit("doc-7", 0.70, &[0.66, 0.74], &cfg)?;
    println!("{}", serde_json::to_string_pretty(&robust)?);

    // A rewrite pushes the score across the threshold.
    let fragile = audit("doc-8", 0.55, &[0.42], &cfg)?;
    println!(
        "doc-8 robust={} agree={} margin={:.2}",
        fragile.robust,
        fragile.decisions_agree(),
        fragile.max_margin
    );
    Ok(())
}
