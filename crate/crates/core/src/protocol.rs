//! Audit harness: semantic equivalence, robustness margins and decision
//! agreement between an original text and its transforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub tau_mia: f64,
    pub eps_rob: f64,
    pub tau_sps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_util: Option<f64>,
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau_mia.is_finite() || !self.tau_sps.is_finite() {
            return Err(Error::Config("tau_mia and tau_sps must be finite".into()));
        }
        if !(self.eps_rob.is_finite() && self.eps_rob > 0.0) {
            return Err(Error::Config(format!("eps_rob must be > 0, got {}", self.eps_rob)));
        }
        if let Some(e) = self.eps_util {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::Config(format!("eps_util must be >= 0, got {e}")));
            }
        }
        Ok(())
    }
}

/// Member iff `score >= tau_mia`.
pub fn decide_membership(score: f64, tau_mia: f64) -> bool {
    score >= tau_mia
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityCheck {
    NotEvaluated,
    Passed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub equivalent: bool,
    pub semantic_ok: bool,
    pub utility: UtilityCheck,
}

/// Equivalent iff `sps_value >= tau_sps` and the utility delta, when
/// supplied, is within `eps_util`. A missing delta is reported as
/// [`UtilityCheck::NotEvaluated`], never as passed.
pub fn semantic_equivalent(
    sps_value: f64,
    utility_delta: Option<f64>,
    cfg: &AuditConfig,
) -> Result<Equivalence> {
    let semantic_ok = sps_value >= cfg.tau_sps;
    let utility = match utility_delta {
        None => UtilityCheck::NotEvaluated,
        Some(d) => {
            let eps = cfg
                .eps_util
                .ok_or_else(|| Error::Config("utility delta supplied but eps_util is unset".into()))?;
            if d.abs() <= eps {
                UtilityCheck::Passed
            } else {
                UtilityCheck::Failed
            }
        }
    };
    Ok(Equivalence {
        equivalent: semantic_ok && utility != UtilityCheck::Failed,
        semantic_ok,
        utility,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub suspect_id: String,
    pub score_original: f64,
    pub scores_transformed: Vec<f64>,
    pub decision_original: bool,
    pub decisions_transformed: Vec<bool>,
    pub max_margin: f64,
    pub non_ambiguous: bool,
    pub robust: bool,
}

impl AuditReport {
    /// Whether every transformed decision matches the original one.
    pub fn decisions_agree(&self) -> bool {
        self.decisions_transformed.iter().all(|&d| d == self.decision_original)
    }
}

pub fn audit(
    suspect_id: &str,
    score_x: f64,
    scores_tx: &[f64],
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    cfg.validate()?;
    if scores_tx.is_empty() {
        return Err(Error::invalid(format!("{suspect_id}: no transformed scores")));
    }
    if !score_x.is_finite() || scores_tx.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("{suspect_id}: non-finite score")));
    }
    let max_margin = scores_tx
        .iter()
        .map(|s| (score_x - s).abs())
        .fold(0.0, f64::max);
    Ok(AuditReport {
        suspect_id: suspect_id.to_owned(),
        score_original: score_x,
        scores_transformed: scores_tx.to_vec(),
        decision_original: decide_membership(score_x, cfg.tau_mia),
        decisions_transformed: scores_tx
            .iter()
            .map(|&s| decide_membership(s, cfg.tau_mia))
            .collect(),
        max_margin,
        non_ambiguous: (score_x - cfg.tau_mia).abs() >= cfg.eps_rob,
        robust: max_margin <= cfg.eps_rob,
    })
}

/// One line of the audit output file: the report, the names of the
/// transforms in `scores_transformed` order, equivalence checks where a
/// semantic score was available, and the config it was computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    #[serde(flatten)]
    pub report: AuditReport,
    pub transforms: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub equivalence: BTreeMap<String, Equivalence>,
    pub config: AuditConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AuditConfig {
        AuditConfig { tau_mia: 0.5, eps_rob: 0.1, tau_sps: 0.6, eps_util: None }
    }

    #[test]
    fn decide_boundary() {
        assert!(decide_membership(0.7, 0.5));
        assert!(decide_membership(0.5, 0.5));
        assert!(!decide_membership(0.3, 0.5));
    }

    #[test]
    fn equivalence_cases() {
        let e = semantic_equivalent(0.8, None, &cfg()).unwrap();
        assert!(e.equivalent);
        assert_eq!(e.utility, UtilityCheck::NotEvaluated);
        assert!(!semantic_equivalent(0.5, None, &cfg()).unwrap().equivalent);
        let with_util = AuditConfig { eps_util: Some(0.05), ..cfg() };
        let e = semantic_equivalent(0.8, Some(0.01), &with_util).unwrap();
        assert!(e.equivalent);
        assert_eq!(e.utility, UtilityCheck::Passed);
        assert!(!semantic_equivalent(0.8, Some(0.2), &with_util).unwrap().equivalent);
        assert!(matches!(semantic_equivalent(0.8, Some(0.01), &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn audit_cases() {
        let r = audit("a", 0.9, &[0.88, 0.85], &cfg()).unwrap();
        assert!(r.robust && r.non_ambiguous && r.decisions_agree());
        assert!(r.decision_original);

        let r = audit("b", 0.55, &[0.40], &cfg()).unwrap();
        assert!(!r.robust);
        assert!((r.max_margin - 0.15).abs() < 1e-12);
        assert!(!r.decisions_agree());

        let r = audit("c", 0.9, &[0.9], &cfg()).unwrap();
        assert!(r.robust);
        assert_eq!(r.max_margin, 0.0);

        assert!(audit("d", 0.9, &[], &cfg()).is_err());
        let bad = AuditConfig { eps_rob: 0.0, ..cfg() };
        assert!(matches!(audit("e", 0.9, &[0.9], &bad), Err(Error::Config(_))));
    }
}
