//! Text-matching baseline for article prediction: the fact is paired with
//! every article's content and the model answers with a relevance token.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Case, LabelCatalog};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tokenizer::{Vocab, END_ID};
use crate::training::Example;

/// First decoded symbol for a relevant pair.
pub const RELEVANT: char = 'y';
/// First decoded symbol for an irrelevant pair.
pub const IRRELEVANT: char = 'n';
pub const DEFAULT_NEG_RATIO: usize = 31;
pub const DEFAULT_THRESHOLD: f64 = 0.7;

const FACT_CAPTION: &str = "Fact: ";
const CONTENT_CAPTION: &str = " Content: ";

/// One fact/article pair; the corpus record fields plus a 0/1 label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub id: String,
    pub fact: String,
    pub article_id: String,
    pub content: String,
    pub label: u8,
}

/// One positive per gold article and `neg_ratio` negatives per positive,
/// drawn without replacement from the case's non-gold articles.
pub fn build_matching_dataset<R: Rng + ?Sized>(
    corpus: &[Case],
    catalog: &LabelCatalog,
    neg_ratio: usize,
    rng: &mut R,
) -> Result<Vec<MatchPair>> {
    if neg_ratio >= catalog.articles.len() {
        return Err(Error::InvalidArgument(format!(
            "negative ratio {neg_ratio} must be below the catalog size {}",
            catalog.articles.len()
        )));
    }
    let mut out = Vec::new();
    for case in corpus {
        let negatives: Vec<usize> =
            (0..catalog.articles.len()).filter(|&i| !case.articles.contains(&catalog.articles[i].article_id)).collect();
        if negatives.len() < neg_ratio {
            return Err(Error::InvalidArgument(format!(
                "case {} has only {} non-gold articles for ratio {neg_ratio}",
                case.id,
                negatives.len()
            )));
        }
        for gold in &case.articles {
            let content = catalog.article_content(gold).ok_or_else(|| Error::UnknownLabel(gold.clone()))?;
            out.push(pair(case, gold, content, 1));
            for k in sample(rng, negatives.len(), neg_ratio) {
                let a = &catalog.articles[negatives[k]];
                out.push(pair(case, &a.article_id, &a.content, 0));
            }
        }
    }
    Ok(out)
}

fn pair(case: &Case, article_id: &str, content: &str, label: u8) -> MatchPair {
    MatchPair { id: case.id.clone(), fact: case.fact.clone(), article_id: article_id.into(), content: content.into(), label }
}

/// Encoded `Fact: .. Content: ..` input. When too long the fact is cut
/// from its end; fails only if the content alone does not fit.
pub fn match_input(vocab: &Vocab, fact: &str, content: &str, max_len: usize) -> Result<Vec<u32>> {
    let head = vocab.encode(FACT_CAPTION).ids;
    let fact = vocab.encode(fact).ids;
    let tail = vocab.encode(&format!("{CONTENT_CAPTION}{content}")).ids;
    let room = max_len.checked_sub(head.len() + tail.len()).ok_or(Error::TooLong { len: head.len() + tail.len(), max: max_len })?;
    Ok(head.into_iter().chain(fact.into_iter().take(room)).chain(tail).collect())
}

fn answer_id(vocab: &Vocab, c: char) -> Result<u32> {
    vocab.id_of_char(c).ok_or_else(|| Error::InvalidArgument(format!("vocabulary lacks the answer symbol `{c}`")))
}

pub fn encode_match_pair(vocab: &Vocab, p: &MatchPair, max_len: usize) -> Result<Example> {
    let answer = answer_id(vocab, if p.label == 1 { RELEVANT } else { IRRELEVANT })?;
    Ok(Example { x: match_input(vocab, &p.fact, &p.content, max_len)?, y: vec![answer, END_ID] })
}

/// Softmax mass of the relevant symbol at the first decoding step.
pub fn match_score(model: &Transformer<f32>, vocab: &Vocab, fact: &str, content: &str) -> Result<f64> {
    let x = match_input(vocab, fact, content, model.config.max_len)?;
    let probs = model.next_token_probs(&x, &[])?;
    Ok(probs[answer_id(vocab, RELEVANT)? as usize] as f64)
}

/// Labels scoring at least `threshold`, or the single best one when none
/// does. The flag reports whether the fallback was used.
pub fn select_by_threshold(scores: &[(String, f64)], threshold: f64) -> (Vec<String>, bool) {
    let passed: Vec<String> = scores.iter().filter(|(_, s)| *s >= threshold).map(|(l, _)| l.clone()).collect();
    if !passed.is_empty() || scores.is_empty() {
        return (passed, false);
    }
    let best = scores.iter().fold(&scores[0], |b, s| if s.1 > b.1 { s } else { b });
    (vec![best.0.clone()], true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPrediction {
    pub articles: Vec<String>,
    pub scores: Vec<(String, f64)>,
    pub fallback: bool,
    /// Wall-clock time of the sequential catalog scan.
    pub elapsed_secs: f64,
}

/// Scores the fact against every catalog article in sequence.
pub fn predict_articles_by_matching(
    model: &Transformer<f32>,
    vocab: &Vocab,
    fact: &str,
    catalog: &LabelCatalog,
    threshold: f64,
) -> Result<MatchPrediction> {
    if catalog.articles.is_empty() {
        return Err(Error::Empty("article catalog is empty"));
    }
    let t0 = Instant::now();
    let scores = catalog
        .articles
        .iter()
        .map(|a| Ok((a.article_id.clone(), match_score(model, vocab, fact, &a.content)?)))
        .collect::<Result<Vec<_>>>()?;
    let elapsed_secs = t0.elapsed().as_secs_f64();
    let (articles, fallback) = select_by_threshold(&scores, threshold);
    Ok(MatchPrediction { articles, scores, fallback, elapsed_secs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(l, s)| (l.to_string(), *s)).collect()
    }

    #[test]
    fn perfect_scorer_returns_gold() {
        let s = scores(&[("a", 1.0), ("b", 0.0), ("c", 1.0)]);
        assert_eq!(select_by_threshold(&s, 0.7), (vec!["a".to_string(), "c".to_string()], false));
    }

    #[test]
    fn falls_back_to_top_one() {
        let s = scores(&[("a", 0.2), ("b", 0.6), ("c", 0.1)]);
        assert_eq!(select_by_threshold(&s, 0.7), (vec!["b".to_string()], true));
    }

    #[test]
    fn long_fact_is_truncated_first() {
        let vocab = Vocab::build(["Fact: Content: abcdefghijklmnopqrstuvwxyz"], Default::default());
        let x = match_input(&vocab, &"a".repeat(100), "xyz", 40).unwrap();
        assert_eq!(x.len(), 40);
        assert_eq!(&x[x.len() - 3..], &vocab.encode("xyz").ids[..]);
        assert!(match_input(&vocab, "a", &"z".repeat(50), 40).is_err());
    }
}
