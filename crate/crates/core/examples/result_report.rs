//! Build a result table by hand and render it in every report format.

use mia_audit::eval::{parse_json_report, render_report, Cell, Regime, ReportFormat, ResultTable};
use mia_audit::scoring::AttackKind;

fn main() -> mia_audit::Result<()> {
    let mut table = ResultTable::default();
    let rows = [
        (AttackKind::Loss, [0.685, 0.602, 0.559]),
        (AttackKind::MinK, [0.690, 0.610, 0.561]),
        (AttackKind::BagOfWords, [0.520, 0.520, 0.520]),
    ];
    for (attack, aucs) in rows {
        for (regime, a) in [Regime::FineTuned, Regime::Sage, Regime::SageR].into_iter().zip(aucs) {
            table.insert(attack, regime, "news", Cell { auc: a, tpr_at_fpr: a / 10.0 });
        }
    }
    for format in [ReportFormat::Markdown, ReportFormat::Tsv] {
        println!("{}", render_report(&table, format)?);
    }
    let json = render_report(&table, ReportFormat::Json)?;
    assert_eq!(parse_json_report(&json)?, table);
    println!("JSON round-trips ({} bytes)", json.len());
    Ok(())
}
