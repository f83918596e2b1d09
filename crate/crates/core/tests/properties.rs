mod support;

use std::collections::BTreeSet;

use irc_core::dataset_builder::AbsentClass;
use irc_core::corpus::{read_jsonl, write_jsonl, AnswerLabel, AnswerTarget};
use irc_core::evaluator::{
    answer_em_strings, answer_f1_strings, answer_metrics, cna_detection_metrics, sf_metrics, stratify, StratifyItem,
};
use irc_core::extraction::{no_answer_penalty, rationale_loss, threshold_extract, SentenceScores};
use irc_core::inference::{rerank_score, top_pairs};
use irc_core::synthetic::{generate, SyntheticSpec};
use proptest::prelude::*;

const EXACT: f64 = 1e-9;

fn answer_text() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("the".to_string()),
        Just("a".to_string()),
        Just("an".to_string()),
        Just("The".to_string()),
        Just("yes".to_string()),
        Just("no".to_string()),
        Just("noanswer".to_string()),
        Just("an_".to_string()),
        Just("a-b".to_string()),
        Just("Élan".to_string()),
        "[a-zA-Z]{1,4}",
        "[0-9]{1,2}",
        "[!,.;'\"()-]{1,2}",
    ];
    let sep = prop_oneof![Just(" "), Just("  "), Just(""), Just("\t"), Just(",")];
    prop::collection::vec((piece, sep), 0..6).prop_map(|v| v.into_iter().map(|(p, s)| format!("{p}{s}")).collect())
}

fn label() -> impl Strategy<Value = AnswerLabel> {
    prop_oneof![Just(AnswerLabel::Yes), Just(AnswerLabel::No), Just(AnswerLabel::Span), Just(AnswerLabel::Cna)]
}

fn target() -> impl Strategy<Value = AnswerTarget> {
    (label(), answer_text()).prop_map(|(l, text)| match l {
        AnswerLabel::Span => AnswerTarget::span(text),
        other => AnswerTarget::label(other),
    })
}

fn id_set() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..12, 0..8)
}

fn logits(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn answer_string_metrics_match_oracle(pred in answer_text(), gold in answer_text()) {
        prop_assert!((answer_f1_strings(&pred, &gold) - support::answer_f1(&pred, &gold)).abs() < EXACT);
        prop_assert_eq!(answer_em_strings(&pred, &gold), support::answer_em(&pred, &gold));
    }

    #[test]
    fn label_aware_answer_metrics_match_oracle(pred in target(), gold in target()) {
        let (em, f1) = answer_metrics(&pred, &gold);
        let (oem, of1) = match (pred.label, gold.label) {
            (AnswerLabel::Span, AnswerLabel::Span) => {
                let (p, g) = (pred.span_text.clone().unwrap(), gold.span_text.clone().unwrap());
                (support::answer_em(&p, &g), support::answer_f1(&p, &g))
            }
            (a, b) => if a == b { (1.0, 1.0) } else { (0.0, 0.0) },
        };
        prop_assert!((em - oem).abs() < EXACT && (f1 - of1).abs() < EXACT);
        // The reference F1 scores two empty normalized answers as 0 while EM scores 1.
        let empty = gold.span_text.as_deref().is_some_and(|g| support::normalize(g).is_empty());
        if !empty {
            prop_assert!(f1 >= em);
        }
    }

    #[test]
    fn sf_metrics_match_oracle(pred in id_set(), gold in id_set()) {
        let s = sf_metrics(&pred.iter().copied().collect(), &gold.iter().copied().collect());
        let (em, p, r, f1) = support::set_scores(&pred, &gold);
        prop_assert!((s.em - em).abs() < EXACT);
        prop_assert!((s.precision - p).abs() < EXACT);
        prop_assert!((s.recall - r).abs() < EXACT);
        prop_assert!((s.f1 - f1).abs() < EXACT);
        prop_assert!(s.f1 >= s.em);
    }

    #[test]
    fn sf_metrics_ignore_id_relabeling(pred in id_set(), gold in id_set(), perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
        let base = sf_metrics(&pred.iter().copied().collect(), &gold.iter().copied().collect());
        let relabel = |v: &[usize]| v.iter().map(|&i| perm[i]).collect::<BTreeSet<_>>();
        prop_assert_eq!(base, sf_metrics(&relabel(&pred), &relabel(&gold)));
    }

    #[test]
    fn cna_detection_matches_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..40)) {
        let (p, g): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let d = cna_detection_metrics(&p, &g).unwrap();
        let (acc, prec, rec, f1) = support::detection(&p, &g);
        prop_assert!((d.accuracy - acc).abs() < EXACT);
        prop_assert!((d.precision - prec).abs() < EXACT);
        prop_assert!((d.recall - rec).abs() < EXACT);
        prop_assert!((d.f1 - f1).abs() < EXACT);
    }

    #[test]
    fn strata_match_oracle(rows in prop::collection::vec((0usize..5, id_set(), id_set(), any::<bool>()), 0..30)) {
        let sets: Vec<(usize, BTreeSet<usize>, BTreeSet<usize>, bool)> = rows
            .iter()
            .map(|(a, g, p, c)| (*a, g.iter().copied().collect(), p.iter().copied().collect(), *c))
            .collect();
        let items: Vec<StratifyItem<'_, usize>> = sets
            .iter()
            .map(|(a, g, p, c)| StratifyItem { absent_gold_count: *a, gold_sf: g, pred_sf: p, predicted_cna: *c })
            .collect();
        let strata = stratify(&items);
        for class in 0..4usize {
            let in_class: Vec<_> = rows.iter().filter(|r| r.0.min(3) == class).collect();
            match strata.by_absent_class.get(&AbsentClass::from_count(class)) {
                Some(s) => {
                    prop_assert_eq!(s.count, in_class.len());
                    prop_assert_eq!(s.cna_predicted, in_class.iter().filter(|r| r.3).count());
                }
                None => prop_assert!(in_class.is_empty()),
            }
        }
        let zero: Vec<_> = rows.iter().filter(|r| r.0 == 0).collect();
        let covered = zero.iter().filter(|r| r.1.iter().all(|g| r.2.contains(g))).count();
        prop_assert_eq!(strata.covered.count, covered);
        prop_assert_eq!(strata.not_covered.count, zero.len() - covered);
    }

    #[test]
    fn rationale_loss_matches_oracle(ls in logits(0..10), mask in prop::collection::vec(any::<bool>(), 10)) {
        let n = ls.len();
        let gold: BTreeSet<usize> = (0..n).filter(|&i| mask[i]).collect();
        let scores = SentenceScores::from_logits((0..n).collect(), ls.clone());
        let loss = rationale_loss(&scores, &gold);
        prop_assert!((loss - support::bce(&ls, &mask[..n])).abs() < EXACT);
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn no_answer_penalty_matches_oracle(ls in logits(1..10), ext in id_set(), ans in id_set()) {
        let n = ls.len();
        let ext: Vec<usize> = ext.into_iter().filter(|&i| i < n).collect();
        let ans: Vec<usize> = ans.into_iter().filter(|&i| i < n).collect();
        let scores = SentenceScores::from_logits((0..n).collect(), ls.clone());
        let penalty = no_answer_penalty(&scores, &ext.iter().copied().collect(), &ans.iter().copied().collect());
        prop_assert!((penalty - support::hinge(&ls, &ext, &ans)).abs() < EXACT);
        prop_assert!(penalty >= 0.0);
        let top = (0..n).fold(0, |b, i| if ls[i] > ls[b] { i } else { b });
        if ans.contains(&top) {
            prop_assert_eq!(penalty, 0.0);
        }
    }

    #[test]
    fn threshold_extraction_is_monotone(ls in logits(0..12), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let scores = SentenceScores::from_logits((0..ls.len()).collect(), ls);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(threshold_extract(&scores, hi).is_subset(&threshold_extract(&scores, lo)));
    }

    #[test]
    fn pair_ranking_is_complete_and_sorted(scores in prop::collection::vec(0.0f64..1.0, 2..11)) {
        let n = scores.len();
        let pairs = top_pairs(&scores, usize::MAX).unwrap();
        prop_assert_eq!(pairs.len(), n * (n - 1) / 2);
        prop_assert!(pairs.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(pairs.iter().all(|p| p.pair.0 < p.pair.1 && (p.score - scores[p.pair.0] - scores[p.pair.1]).abs() < EXACT));
    }

    #[test]
    fn rerank_score_strictly_decreases_in_cna_probability(s in 0.0f64..2.0, c1 in 0.0f64..1.0, c2 in 0.0f64..1.0) {
        prop_assume!(c1 < c2);
        prop_assert!(rerank_score(s, c1) > rerank_score(s, c2));
    }
}

#[test]
fn synthetic_examples_roundtrip_through_jsonl() {
    let data = generate(&SyntheticSpec { examples: 20, ..SyntheticSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&path, &data).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), data);
}
