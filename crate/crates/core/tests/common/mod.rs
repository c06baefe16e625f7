#![allow(dead_code)]

use depjudge::corpus::{article_id, charge_id, ArticleEntry, Case, LabelCatalog, PenaltyTerm};
use depjudge::prompting::{OrderSpec, TaskKind};
use proptest::prelude::*;

pub fn catalog(n_articles: usize, n_charges: usize) -> LabelCatalog {
    LabelCatalog {
        articles: (0..n_articles)
            .map(|i| ArticleEntry { article_id: article_id(i), content: format!("Rule {i} forbids item {i}.") })
            .collect(),
        charges: (0..n_charges).map(charge_id).collect(),
    }
}

pub fn penalty() -> impl Strategy<Value = PenaltyTerm> {
    prop_oneof![
        8 => (0u32..=300).prop_map(|months| PenaltyTerm::Fixed { months }),
        1 => Just(PenaltyTerm::Life),
        1 => Just(PenaltyTerm::Death),
    ]
}

/// Random case over `catalog(n_articles, n_charges)`.
pub fn case(n_articles: usize, n_charges: usize) -> impl Strategy<Value = Case> {
    (
        prop::collection::btree_set(0..n_articles, 1..4),
        prop::collection::btree_set(0..n_charges, 1..3),
        penalty(),
        "[a-z ]{5,40}",
        "[A-Za-z ,.]{0,30}",
    )
        .prop_map(|(a, c, penalty, fact, view)| Case {
            id: "case_x".into(),
            fact: format!("Z {fact}."),
            articles: a.into_iter().map(article_id).collect(),
            charges: c.into_iter().map(charge_id).collect(),
            penalty,
            court_view: view,
        })
}

/// Random valid order over a random subset of the five tasks.
pub fn order() -> impl Strategy<Value = OrderSpec> {
    prop::sample::subsequence(TaskKind::ALL.to_vec(), 1..=5)
        .prop_flat_map(|tasks| Just(tasks).prop_shuffle())
        .prop_filter_map("article content needs articles", |tasks| OrderSpec::new(tasks).ok())
}
