mod common;

use std::collections::HashSet;

use depjudge::corpus::{Case, LabelCatalog, PenaltyTerm};
use depjudge::metrics::{macro_f1, micro_f1, pmi_matrix};
use depjudge::prompting::{build_prompt, parse_decoded, span_corrupt, OrderSpec, TaskKind, TaskPredictions};
use depjudge::textmatch::{build_matching_dataset, select_by_threshold};
use depjudge::tokenizer::{Vocab, VocabConfig, DELIM};
use depjudge::training::EarlyStopping;
use proptest::prelude::*;
use rand::SeedableRng;

/// The unmasked document written out field by field.
fn expected_document(case: &Case, catalog: &LabelCatalog, order: &OrderSpec) -> String {
    let sorted = |ids: &[String], all: &[String]| {
        all.iter().filter(|l| ids.contains(l)).cloned().collect::<Vec<_>>()
    };
    let arts = sorted(&case.articles, &catalog.article_ids());
    let mut doc = format!("Fact: {}", case.fact);
    let rank = [TaskKind::CourtView, TaskKind::Article, TaskKind::ArticleContent, TaskKind::Charge, TaskKind::Penalty];
    for t in rank.into_iter().filter(|t| order.contains(*t)) {
        doc.push_str(&match t {
            TaskKind::CourtView => format!(" View: {}", case.court_view),
            TaskKind::Article => format!(" Articles: {}.", arts.join(DELIM)),
            TaskKind::ArticleContent => {
                let c: Vec<&str> = arts.iter().map(|a| catalog.article_content(a).unwrap()).collect();
                format!(" Content: {}", c.join(DELIM))
            }
            TaskKind::Charge => format!(" Charges: {}.", sorted(&case.charges, &catalog.charges).join(DELIM)),
            TaskKind::Penalty => {
                let p = match case.penalty {
                    PenaltyTerm::Fixed { months } => months.to_string(),
                    PenaltyTerm::Life => "life".into(),
                    PenaltyTerm::Death => "death".into(),
                };
                format!(" Penalty: {p} months.")
            }
        });
    }
    doc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn prompt_spans_substitute_back_into_the_document(case in common::case(12, 6), order in common::order()) {
        let cat = common::catalog(12, 6);
        let pt = build_prompt(&case, &cat, &order).unwrap();
        prop_assert_eq!(pt.reconstruct().unwrap(), expected_document(&case, &cat, &order));
        prop_assert_eq!(pt.sentinel_map.len(), order.len());
    }

    #[test]
    fn parsing_a_serialized_target_recovers_the_labels(case in common::case(12, 6), order in common::order()) {
        let cat = common::catalog(12, 6);
        let pt = build_prompt(&case, &cat, &order).unwrap();
        let parsed = parse_decoded(&pt.target_text, &order, &cat);
        prop_assert!(!parsed.malformed);
        prop_assert_eq!(parsed, TaskPredictions::gold(&case, &cat, &order).unwrap());
    }

    #[test]
    fn target_prefix_is_a_prefix(case in common::case(12, 6), order in common::order(), k in 0usize..6) {
        let cat = common::catalog(12, 6);
        let pt = build_prompt(&case, &cat, &order).unwrap();
        prop_assert!(pt.target_text.starts_with(&pt.target_prefix(k)));
    }

    #[test]
    fn span_corruption_reconstructs_and_masks_the_budget(text in "[a-z ]{8,200}", seed in any::<u64>(), ratio in 0.05f64..0.5) {
        let mut rng = depjudge::Rng::seed_from_u64(seed);
        let pt = span_corrupt(&text, ratio, 3.0, &mut rng).unwrap();
        prop_assert_eq!(pt.reconstruct().unwrap(), text.clone());
        let n = text.chars().count();
        let masked: usize = pt.segments().spans.iter().map(|(_, s)| s.chars().count()).sum();
        prop_assert_eq!(masked, ((n as f64 * ratio).round() as usize).max(1));
    }

    #[test]
    fn vocab_round_trips_known_text(text in "[a-zA-Z0-9 ,.]{0,80}") {
        let v = Vocab::build([text.as_str()], VocabConfig::default());
        let e = v.encode(&text);
        prop_assert_eq!(e.unknown, 0);
        prop_assert_eq!(v.decode(&e.ids), text);
    }

    #[test]
    fn f1_matches_confusion_counting(data in prop::collection::vec(
        (prop::collection::btree_set(0u8..6, 0..4), prop::collection::btree_set(0u8..6, 1..4)), 1..40)) {
        let preds: Vec<Vec<u8>> = data.iter().map(|(p, _)| p.iter().copied().collect()).collect();
        let golds: Vec<Vec<u8>> = data.iter().map(|(_, g)| g.iter().copied().collect()).collect();
        let (mut tp, mut fp, mut fnn) = ([0f64; 6], [0f64; 6], [0f64; 6]);
        for (p, g) in preds.iter().zip(&golds) {
            for l in 0..6u8 {
                match (p.contains(&l), g.contains(&l)) {
                    (true, true) => tp[l as usize] += 1.0,
                    (true, false) => fp[l as usize] += 1.0,
                    (false, true) => fnn[l as usize] += 1.0,
                    _ => {}
                }
            }
        }
        let f1 = |tp: f64, fp: f64, fnn: f64| if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        let micro = f1(tp.iter().sum(), fp.iter().sum(), fnn.iter().sum());
        let macro_ = (0..6).map(|l| f1(tp[l], fp[l], fnn[l])).sum::<f64>() / 6.0;
        prop_assert!((micro_f1(&preds, &golds).unwrap() - micro).abs() < 1e-12);
        let labels: Vec<u8> = (0..6).collect();
        prop_assert!((macro_f1(&preds, &golds, &labels).unwrap() - macro_).abs() < 1e-12);
    }

    #[test]
    fn pmi_is_invariant_to_scaling_counts(data in prop::collection::vec((0u8..4, 0u8..3), 5..60), k in 2usize..5) {
        let xs: Vec<Vec<String>> = data.iter().map(|(x, _)| vec![format!("x{x}")]).collect();
        let ys: Vec<Vec<String>> = data.iter().map(|(_, y)| vec![format!("y{y}")]).collect();
        let rep = |v: &[Vec<String>]| v.iter().flat_map(|e| std::iter::repeat_n(e.clone(), k)).collect::<Vec<_>>();
        let a = pmi_matrix(&xs, &ys, 10, 10).unwrap();
        let b = pmi_matrix(&rep(&xs), &rep(&ys), 10, 10).unwrap();
        prop_assert_eq!(&a.row_labels, &b.row_labels);
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_articles(scores in prop::collection::vec(0.0f64..1.0, 1..20), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
        let s: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &v)| (format!("a{i}"), v)).collect();
        let (low, fb_low) = select_by_threshold(&s, t);
        let (high, fb_high) = select_by_threshold(&s, t + dt);
        if !fb_low && !fb_high {
            prop_assert!(high.iter().all(|a| low.contains(a)));
        }
        prop_assert!(!low.is_empty());
    }

    #[test]
    fn matching_negatives_are_never_gold(cases in prop::collection::vec(common::case(40, 5), 1..5), seed in any::<u64>()) {
        let cases: Vec<Case> = cases.into_iter().enumerate().map(|(i, mut c)| { c.id = format!("c{i}"); c }).collect();
        let cat = common::catalog(40, 5);
        let mut rng = depjudge::Rng::seed_from_u64(seed);
        let pairs = build_matching_dataset(&cases, &cat, 31, &mut rng).unwrap();
        let expected: usize = cases.iter().map(|c| c.articles.len() * 32).sum();
        prop_assert_eq!(pairs.len(), expected);
        for p in &pairs {
            let case = cases.iter().find(|c| c.id == p.id).unwrap();
            prop_assert_eq!(p.label == 1, case.articles.contains(&p.article_id));
        }
    }

    #[test]
    fn early_stopping_best_never_decreases(metrics in prop::collection::vec(0.0f64..1.0, 1..30), patience in 0usize..5) {
        let mut s = EarlyStopping::new(patience);
        let mut best_seen = f64::NEG_INFINITY;
        for m in metrics {
            let d = s.observe(m);
            best_seen = best_seen.max(m);
            prop_assert_eq!(s.best(), Some(best_seen));
            if d == depjudge::training::StopDecision::Stop {
                break;
            }
        }
    }
}

#[test]
fn negatives_within_a_positive_are_distinct() {
    let cat = common::catalog(64, 4);
    let mut case = depjudge::corpus::Case {
        id: "c".into(),
        fact: "f".into(),
        articles: vec!["art_1".into(), "art_5".into()],
        charges: vec!["theft".into()],
        penalty: PenaltyTerm::Fixed { months: 3 },
        court_view: String::new(),
    };
    let mut rng = depjudge::Rng::seed_from_u64(3);
    let pairs = build_matching_dataset(std::slice::from_ref(&case), &cat, 31, &mut rng).unwrap();
    assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 2);
    assert_eq!(pairs.iter().filter(|p| p.label == 0).count(), 62);
    for chunk in pairs.chunks(32) {
        let ids: HashSet<&str> = chunk.iter().map(|p| p.article_id.as_str()).collect();
        assert_eq!(ids.len(), 32);
    }
    let positives = build_matching_dataset(std::slice::from_ref(&case), &cat, 0, &mut rng).unwrap();
    assert!(positives.iter().all(|p| p.label == 1) && positives.len() == 2);
    assert!(build_matching_dataset(std::slice::from_ref(&case), &cat, 64, &mut rng).is_err());
    case.articles.push("art_99".into());
    assert!(build_matching_dataset(&[case], &cat, 3, &mut rng).is_err());
}
