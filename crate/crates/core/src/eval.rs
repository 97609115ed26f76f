//! ROC/AUC, TPR at a fixed FPR, run aggregation and report rendering.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::scoring::AttackKind;

pub const REPORT_SCHEMA: &str = "mia-audit/result-table/v1";
pub const DEFAULT_FPR_TARGET: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub attack: AttackKind,
    pub score: f64,
    pub label: Label,
}

fn split_labels(examples: &[ScoredExample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut members = Vec::new();
    let mut nonmembers = Vec::new();
    for e in examples {
        if !e.score.is_finite() {
            return Err(Error::invalid(format!("non-finite score for {:?}", e.id)));
        }
        match e.label {
            Label::Member => members.push(e.score),
            Label::Nonmember => nonmembers.push(e.score),
        }
    }
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::SingleLabel);
    }
    Ok((members, nonmembers))
}

/// Rank-sum AUC: the probability that a random member outscores a random
/// nonmember, ties counting one half.
pub fn auc(examples: &[ScoredExample]) -> Result<f64> {
    let (members, nonmembers) = split_labels(examples)?;
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the member rank sum, using mid-ranks for ties; stays integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the mid-rank (i+1+j)/2
        let twice_mid = (i + 1 + j) as u64;
        let m_in_group = all[i..j].iter().filter(|x| x.1).count() as u64;
        twice_rank_sum += twice_mid * m_in_group;
        i = j;
    }
    let m = members.len() as u64;
    let n = nonmembers.len() as u64;
    // 2U = 2R - m(m+1)
    let twice_u = twice_rank_sum - m * (m + 1);
    Ok(twice_u as f64 / 2.0 / (m * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

/// ROC curve sweeping the threshold over every distinct score, highest
/// first; tied scores move both rates at once.
pub fn roc_curve(examples: &[ScoredExample]) -> Result<RocCurve> {
    let (members, nonmembers) = split_labels(examples)?;
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (m, n) = (members.len() as f64, nonmembers.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / m));
    }
    Ok(RocCurve { points })
}

/// TPR at the most permissive nonmember-anchored threshold whose FPR does
/// not exceed `fpr_target`.
///
/// Candidate rules are "score > highest nonmember score" (FPR 0),
/// "score >= s" for each nonmember score `s`, and accept-all (FPR 1). Rates are read off the
/// empirical step function, never interpolated.
pub fn tpr_at_fpr(examples: &[ScoredExample], fpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::invalid(format!("fpr_target {fpr_target} outside [0, 1]")));
    }
    let (mut members, mut nonmembers) = split_labels(examples)?;
    members.sort_by(|a, b| b.total_cmp(a));
    nonmembers.sort_by(|a, b| b.total_cmp(a));
    let n = nonmembers.len();

    // Largest number of admitted nonmembers allowed; exact for rational
    // targets like 0.01 * 200.
    let budget = {
        let raw = fpr_target * n as f64;
        let rounded = raw.round();
        if (raw - rounded).abs() < 1e-9 * n.max(1) as f64 {
            rounded as usize
        } else {
            raw.floor() as usize
        }
    };

    // Admitting nonmembers down to index j (inclusive) admits every
    // nonmember tied with nonmembers[j].
    let mut threshold: Option<f64> = None;
    let mut j = 0;
    while j < n {
        let s = nonmembers[j];
        let mut end = j;
        while end < n && nonmembers[end] == s {
            end += 1;
        }
        if end > budget {
            break;
        }
        threshold = Some(s);
        j = end;
    }

    let admitted = match threshold {
        // Every nonmember is within budget: accept everything.
        Some(_) if budget >= n => members.len(),
        Some(t) => members.iter().filter(|&&m| m >= t).count(),
        None => members.iter().filter(|&&m| m > nonmembers[0]).count(),
    };
    Ok(admitted as f64 / members.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "FT")]
    FineTuned,
    #[serde(rename = "SOFT")]
    Soft,
    #[serde(rename = "SAGE")]
    Sage,
    #[serde(rename = "SAGE-R")]
    SageR,
    #[serde(rename = "FT-F")]
    FactsRemoved,
    #[serde(rename = "PT")]
    Pretrained,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::FineTuned,
        Regime::Soft,
        Regime::Sage,
        Regime::SageR,
        Regime::FactsRemoved,
        Regime::Pretrained,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Regime::FineTuned => "FT",
            Regime::Soft => "SOFT",
            Regime::Sage => "SAGE",
            Regime::SageR => "SAGE-R",
            Regime::FactsRemoved => "FT-F",
            Regime::Pretrained => "PT",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub auc: f64,
    pub tpr_at_fpr: f64,
}

pub type Row = BTreeMap<Regime, BTreeMap<String, Cell>>;

/// attack -> regime -> dataset -> cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: BTreeMap<AttackKind, Row>,
    pub provenance: Vec<String>,
}

impl ResultTable {
    pub fn insert(&mut self, attack: AttackKind, regime: Regime, dataset: &str, cell: Cell) {
        self.rows
            .entry(attack)
            .or_default()
            .entry(regime)
            .or_default()
            .insert(dataset.to_owned(), cell);
    }

    pub fn get(&self, attack: AttackKind, regime: Regime, dataset: &str) -> Option<&Cell> {
        self.rows.get(&attack)?.get(&regime)?.get(dataset)
    }

    /// Evaluates scored examples into cells for one regime/dataset.
    pub fn from_scores(
        examples: &[ScoredExample],
        regime: Regime,
        dataset: &str,
        fpr_target: f64,
        run_id: &str,
    ) -> Result<Self> {
        let mut by_attack: BTreeMap<AttackKind, Vec<ScoredExample>> = BTreeMap::new();
        for e in examples {
            by_attack.entry(e.attack).or_default().push(e.clone());
        }
        let mut t = ResultTable {
            provenance: vec![run_id.to_owned()],
            ..Default::default()
        };
        for (attack, ex) in by_attack {
            let cell = Cell {
                auc: auc(&ex)?,
                tpr_at_fpr: tpr_at_fpr(&ex, fpr_target)?,
            };
            t.insert(attack, regime, dataset, cell);
        }
        Ok(t)
    }

    /// Ordered `(dataset, regime)` columns present anywhere in the table.
    pub fn columns(&self) -> Vec<(String, Regime)> {
        let mut cols: BTreeMap<(String, Regime), ()> = BTreeMap::new();
        for row in self.rows.values() {
            for (regime, datasets) in row {
                for d in datasets.keys() {
                    cols.insert((d.clone(), *regime), ());
                }
            }
        }
        cols.into_keys().collect()
    }

    fn shape(&self) -> Vec<(AttackKind, Regime, String)> {
        let mut out = Vec::new();
        for (a, row) in &self.rows {
            for (r, ds) in row {
                for d in ds.keys() {
                    out.push((*a, *r, d.clone()));
                }
            }
        }
        out
    }

    /// Combines tables with disjoint cells.
    pub fn merge(mut self, other: ResultTable) -> Result<Self> {
        for (a, row) in other.rows {
            for (r, ds) in row {
                for (d, cell) in ds {
                    if self.get(a, r, &d).is_some() {
                        return Err(Error::invalid(format!("cell {a}/{r}/{d} present in both tables")));
                    }
                    self.insert(a, r, &d, cell);
                }
            }
        }
        self.provenance.extend(other.provenance);
        Ok(self)
    }
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Cell-wise mean of tables with identical structure.
pub fn aggregate_runs(tables: &[ResultTable]) -> Result<ResultTable> {
    let Some(first) = tables.first() else {
        return Err(Error::invalid("no tables to aggregate"));
    };
    let shape = first.shape();
    for (i, t) in tables.iter().enumerate().skip(1) {
        if t.shape() != shape {
            return Err(Error::invalid(format!("table {i} differs in structure from table 0")));
        }
    }
    let mut out = ResultTable::default();
    for (a, r, d) in &shape {
        let cells: Vec<&Cell> = tables
            .iter()
            .map(|t| t.get(*a, *r, d).expect("shape checked"))
            .collect();
        out.insert(
            *a,
            *r,
            d,
            Cell {
                auc: sorted_mean(cells.iter().map(|c| c.auc).collect()),
                tpr_at_fpr: sorted_mean(cells.iter().map(|c| c.tpr_at_fpr).collect()),
            },
        );
    }
    out.provenance = tables.iter().flat_map(|t| t.provenance.iter().cloned()).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Tsv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ReportFormat::Tsv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Auc,
    Tpr,
}

impl Metric {
    fn title(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::Tpr => "TPR@FPR",
        }
    }

    fn of(self, c: &Cell) -> f64 {
        match self {
            Metric::Auc => c.auc,
            Metric::Tpr => c.tpr_at_fpr,
        }
    }
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.3}"))
}

/// Per-column mean over every attack except Bag-of-Words.
fn footer(table: &ResultTable, cols: &[(String, Regime)], metric: Metric) -> Vec<Option<f64>> {
    cols.iter()
        .map(|(d, r)| {
            let v: Vec<f64> = table
                .rows
                .iter()
                .filter(|(a, _)| **a != AttackKind::BagOfWords)
                .filter_map(|(a, _)| table.get(*a, *r, d).map(|c| metric.of(c)))
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    schema: String,
    #[serde(flatten)]
    table: ResultTable,
}

/// Renders the table. Columns are grouped by dataset, regimes in
/// FT, SOFT, SAGE, SAGE-R, FT-F, PT order; numbers use three decimals
/// except in JSON, which keeps full precision.
pub fn render_report(table: &ResultTable, format: ReportFormat) -> Result<String> {
    let cols = table.columns();
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(&JsonReport {
                schema: REPORT_SCHEMA.to_owned(),
                table: table.clone(),
            })?;
            out.push('\n');
        }
        ReportFormat::Tsv => {
            out.push_str("metric\tattack");
            for (d, r) in &cols {
                write!(out, "\t{d}/{r}").unwrap();
            }
            out.push('\n');
            for metric in [Metric::Auc, Metric::Tpr] {
                for attack in table.rows.keys() {
                    write!(out, "{}\t{}", metric.title(), attack).unwrap();
                    for (d, r) in &cols {
                        let v = table.get(*attack, *r, d).map(|c| metric.of(c));
                        write!(out, "\t{}", fmt3(v)).unwrap();
                    }
                    out.push('\n');
                }
            }
        }
        ReportFormat::Markdown => {
            for (i, metric) in [Metric::Auc, Metric::Tpr].into_iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                writeln!(out, "### {}", metric.title()).unwrap();
                out.push('\n');
                out.push_str("Attack");
                for (d, r) in &cols {
                    write!(out, " | {d} {r}").unwrap();
                }
                out.push('\n');
                out.push_str("---");
                for _ in &cols {
                    out.push_str(" | ---");
                }
                out.push('\n');
                for attack in table.rows.keys() {
                    out.push_str(attack.display_name());
                    for (d, r) in &cols {
                        let v = table.get(*attack, *r, d).map(|c| metric.of(c));
                        write!(out, " | {}", fmt3(v)).unwrap();
                    }
                    out.push('\n');
                }
                if !table.rows.is_empty() {
                    out.push_str("Average");
                    for v in footer(table, &cols, metric) {
                        write!(out, " | {}", fmt3(v)).unwrap();
                    }
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}

/// Parses a JSON report produced by [`render_report`].
pub fn parse_json_report(s: &str) -> Result<ResultTable> {
    let r: JsonReport = serde_json::from_str(s)?;
    if r.schema != REPORT_SCHEMA {
        return Err(Error::invalid(format!("unsupported report schema {:?}", r.schema)));
    }
    Ok(r.table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(scores_m: &[f64], scores_n: &[f64]) -> Vec<ScoredExample> {
        let mk = |s: f64, label, i: usize| ScoredExample {
            id: format!("{label}-{i}"),
            attack: AttackKind::Loss,
            score: s,
            label,
        };
        scores_m
            .iter()
            .enumerate()
            .map(|(i, &s)| mk(s, Label::Member, i))
            .chain(scores_n.iter().enumerate().map(|(i, &s)| mk(s, Label::Nonmember, i)))
            .collect()
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&ex(&[2.0, 3.0], &[1.0, 2.5])).unwrap(), 0.75);
        assert_eq!(auc(&ex(&[5.0, 6.0], &[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(auc(&ex(&[1.0, 1.0], &[1.0, 1.0, 1.0])).unwrap(), 0.5);
        assert!(matches!(auc(&ex(&[1.0], &[])), Err(Error::SingleLabel)));
    }

    #[test]
    fn roc_area_matches_auc_with_ties() {
        let e = ex(&[2.0, 3.0, 3.0, 1.0], &[1.0, 3.0, 0.5]);
        let roc = roc_curve(&e).unwrap();
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        assert!((roc.area() - auc(&e).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tpr_cases() {
        let e = ex(&[3.0, 4.0], &[1.0, 2.0, 2.5, 3.5]);
        assert_eq!(tpr_at_fpr(&e, 1.0).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&e, 0.25).unwrap(), 0.5);
        assert_eq!(tpr_at_fpr(&e, 0.0).unwrap(), 0.5);
        let sep = ex(
            &(0..50).map(|i| 1000.0 + i as f64).collect::<Vec<_>>(),
            &(0..200).map(f64::from).collect::<Vec<_>>(),
        );
        assert_eq!(tpr_at_fpr(&sep, 0.01).unwrap(), 1.0);
        assert!(tpr_at_fpr(&ex(&[1.0], &[]), 0.01).is_err());
    }

    #[test]
    fn regime_labels_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.label().parse::<Regime>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.label()));
        }
    }

    fn loss_row() -> ResultTable {
        let mut t = ResultTable::default();
        for (r, v) in [(Regime::FineTuned, 0.685), (Regime::Sage, 0.602), (Regime::SageR, 0.559)] {
            t.insert(AttackKind::Loss, r, "arxiv", Cell { auc: v, tpr_at_fpr: 0.0 });
        }
        t.provenance.push("run".into());
        t
    }

    #[test]
    fn markdown_row() {
        let md = render_report(&loss_row(), ReportFormat::Markdown).unwrap();
        assert!(md.contains("\nLoss | 0.685 | 0.602 | 0.559\n"), "{md}");
        assert!(md.contains("Attack | arxiv FT | arxiv SAGE | arxiv SAGE-R\n"));
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = ResultTable::default();
        let md = render_report(&t, ReportFormat::Markdown).unwrap();
        assert_eq!(md, "### AUC\n\nAttack\n---\n\n### TPR@FPR\n\nAttack\n---\n");
        assert_eq!(render_report(&t, ReportFormat::Tsv).unwrap(), "metric\tattack\n");
    }

    #[test]
    fn json_round_trip() {
        let t = loss_row();
        let s = render_report(&t, ReportFormat::Json).unwrap();
        assert!(s.contains(REPORT_SCHEMA));
        assert_eq!(parse_json_report(&s).unwrap(), t);
    }

    #[test]
    fn aggregate_cases() {
        let t = loss_row();
        let same = aggregate_runs(&[t.clone(), t.clone(), t.clone()]).unwrap();
        assert_eq!(same.rows, t.rows);
        assert_eq!(same.provenance.len(), 3);

        let mk = |v: f64| {
            let mut t = ResultTable::default();
            t.insert(AttackKind::Loss, Regime::Sage, "d", Cell { auc: v, tpr_at_fpr: v });
            t
        };
        let avg = aggregate_runs(&[mk(0.6), mk(0.7), mk(0.8)]).unwrap();
        assert!((avg.get(AttackKind::Loss, Regime::Sage, "d").unwrap().auc - 0.7).abs() < 1e-12);

        let mut other = mk(0.6);
        other.insert(AttackKind::Zlib, Regime::Sage, "d", Cell { auc: 0.5, tpr_at_fpr: 0.0 });
        assert!(aggregate_runs(&[mk(0.6), other]).is_err());
    }

    #[test]
    fn footer_excludes_bag_of_words() {
        let mut t = loss_row();
        t.insert(AttackKind::Zlib, Regime::FineTuned, "arxiv", Cell { auc: 0.715, tpr_at_fpr: 0.0 });
        t.insert(AttackKind::BagOfWords, Regime::FineTuned, "arxiv", Cell { auc: 0.1, tpr_at_fpr: 0.0 });
        let md = render_report(&t, ReportFormat::Markdown).unwrap();
        assert!(md.contains("Average | 0.700 |"), "{md}");
    }
}
