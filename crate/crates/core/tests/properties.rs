//! Invariants checked over generated inputs.

use mia_audit::corpus::{parse_sectioned_document, Document, Label, SectionKind};
use mia_audit::eval::{auc, tpr_at_fpr, ScoredExample};
use mia_audit::metrics::{jaccard_words, ngram_overlap, word_sim, NgramUnit, SparseFeatureVector, cosine_sparse};
use mia_audit::protocol::{audit, AuditConfig};
use mia_audit::redaction::{apply_redaction, assign_placeholders, placeholder_spans, AnchorKind, FactualAnchor};
use mia_audit::scoring::{k_count, loss_score, min_k, zlib_len, TokenScore, TokenScoreRecord, Variant};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec("[A-Za-z0-9']{1,8}[ ,.;!?]{0,2}", 0..40).prop_map(|w| w.join(" "))
}

fn section_body() -> impl Strategy<Value = String> {
    // Anything but the tag delimiter.
    "[^<]{0,60}"
}

fn examples() -> impl Strategy<Value = Vec<ScoredExample>> {
    (prop::collection::vec(-50i32..50, 1..60), prop::collection::vec(-50i32..50, 1..60)).prop_map(|(m, n)| {
        let mk = |(i, (s, label)): (usize, (i32, Label))| ScoredExample {
            id: format!("e{i}"),
            attack: mia_audit::scoring::AttackKind::Loss,
            score: f64::from(s) / 4.0,
            label,
        };
        m.into_iter()
            .map(|s| (s, Label::Member))
            .chain(n.into_iter().map(|s| (s, Label::Nonmember)))
            .enumerate()
            .map(mk)
            .collect()
    })
}

fn record(lps: Vec<f64>) -> TokenScoreRecord {
    TokenScoreRecord {
        id: "r".into(),
        variant: Variant::Original,
        text_bytes: lps.len(),
        tokens: lps.into_iter().map(TokenScore::plain).collect(),
    }
}

proptest! {
    #[test]
    fn zlib_length_matches_reference_deflate(x in ".{0,400}", level in 0u32..=9) {
        let want = miniz_oxide::deflate::compress_to_vec_zlib(x.as_bytes(), level as u8).len();
        prop_assert_eq!(zlib_len(&x, level), want);
    }

    #[test]
    fn surface_metrics_are_bounded(x in text(), y in text()) {
        for v in [
            jaccard_words(&x, &y),
            ngram_overlap(&x, &y, NgramUnit::Word3),
            ngram_overlap(&x, &y, NgramUnit::Char5),
            word_sim(&x, &y),
        ] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        prop_assert_eq!(jaccard_words(&x, &y), jaccard_words(&y, &x));
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(
        a in prop::collection::btree_map(0usize..64, 0.01f64..10.0, 0..20),
        b in prop::collection::btree_map(0usize..64, 0.01f64..10.0, 0..20),
    ) {
        let f = SparseFeatureVector::from_entries(64, a).unwrap();
        let g = SparseFeatureVector::from_entries(64, b).unwrap();
        let c = cosine_sparse(&f, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_sparse(&g, &f).unwrap());
    }

    #[test]
    fn markup_round_trips(bodies in prop::collection::vec((any::<bool>(), section_body()), 1..8)) {
        let parts: Vec<(SectionKind, &str)> = bodies
            .iter()
            .map(|(s, b)| (if *s { SectionKind::Structural } else { SectionKind::Narrative }, b.as_str()))
            .collect();
        let raw = Document::markup_from(&parts);
        let doc = parse_sectioned_document("d", &raw).unwrap();
        prop_assert_eq!(doc.sections.len(), parts.len());
        for (s, (k, b)) in doc.sections.iter().zip(&parts) {
            prop_assert_eq!(s.kind, *k);
            prop_assert_eq!(s.text.as_str(), *b);
            prop_assert_eq!(&raw[s.span.clone()], *b);
        }
        prop_assert_eq!(doc.render(), raw);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(ex in examples()) {
        let a = auc(&ex).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let shifted: Vec<_> = ex.iter().cloned().map(|mut e| { e.score = e.score * 3.0 + 7.0; e }).collect();
        prop_assert_eq!(a, auc(&shifted).unwrap());
        let mut rev = ex.clone();
        rev.reverse();
        prop_assert_eq!(a, auc(&rev).unwrap());
    }

    #[test]
    fn tpr_is_monotone_in_target(ex in examples(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(tpr_at_fpr(&ex, lo).unwrap() <= tpr_at_fpr(&ex, hi).unwrap());
    }

    #[test]
    fn min_k_is_between_min_and_loss(lps in prop::collection::vec(-20.0f64..-0.001, 1..80), k in 0.5f64..=100.0) {
        let r = record(lps.clone());
        let mk = min_k(&r, k).unwrap().score;
        let loss = loss_score(&r).unwrap().score;
        let lo = lps.iter().copied().fold(f64::INFINITY, f64::min);
        let n = k_count(lps.len(), k).unwrap();
        prop_assert!((1..=lps.len()).contains(&n));
        // Mean of the lowest log-probabilities sits between the minimum and the overall mean.
        prop_assert!(lo - 1e-12 <= mk && mk <= loss + 1e-12, "{lo} {mk} {loss}");
    }

    #[test]
    fn redaction_is_idempotent(
        words in prop::collection::vec(prop::sample::select(vec!["Acme", "Acme Corp", "42", "4", "2020", "May 2020", "and", "the", "rose"]), 1..30),
        picks in prop::collection::vec(prop::sample::select(vec!["Acme", "Acme Corp", "42", "4", "2020", "May 2020"]), 0..5),
    ) {
        let prose = words.join(" ");
        let anchors: Vec<_> = picks.iter().map(|v| FactualAnchor::new(*v, AnchorKind::Entity)).collect();
        let plan = assign_placeholders(&prose, &anchors);
        let once = apply_redaction(&prose, &plan);
        prop_assert_eq!(&once.mask_spans, &placeholder_spans(&once.text));
        let twice = apply_redaction(&once.text, &plan);
        prop_assert_eq!(once.text, twice.text);
    }

    #[test]
    fn robust_and_unambiguous_members_stay_members(
        tau in -10.0f64..10.0, eps in 0.001f64..2.0, gap in 0.0f64..5.0, shifts in prop::collection::vec(-1.0f64..=1.0, 1..6),
    ) {
        let a = tau + eps + gap;
        let tx: Vec<f64> = shifts.iter().map(|s| a + s * eps).collect();
        let cfg = AuditConfig { tau_mia: tau, eps_rob: eps, tau_sps: 0.6, eps_util: None };
        let r = audit("x", a, &tx, &cfg).unwrap();
        if r.robust && r.non_ambiguous {
            prop_assert!(r.decisions_agree());
        }
    }
}
