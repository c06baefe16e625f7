//! Interpretability outputs: cross-attention dumps, label PMI under gold,
//! predicted and mispredicted scenarios, and counterfactual span forcing.

use serde::{Deserialize, Serialize};

use crate::corpus::{Case, LabelCatalog};
use crate::error::{Error, Result};
use crate::metrics::{bin_penalty, error_slice, pmi_matrix, PmiMatrix};
use crate::model::{shift_right, Transformer};
use crate::prompting::{
    build_prompt, decoded_text, parse_decoded, parse_penalty, split_segments, OrderSpec, TaskKind, TaskPredictions,
};
use crate::tokenizer::{sentinel, Vocab, END_ID, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub case_id: String,
    pub input_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
    /// `output_tokens.len() x input_tokens.len()`; row `i` is the attention
    /// used to predict output token `i`.
    pub matrix: Vec<Vec<f64>>,
}

impl AttentionRecord {
    /// Long format `output_index,input_index,output_token,input_token,weight`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("out,in,out_token,in_token,weight\n");
        let q = |t: &str| format!("\"{}\"", t.replace('"', "\"\""));
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                s.push_str(&format!("{i},{j},{},{},{w:.6}\n", q(&self.output_tokens[i]), q(&self.input_tokens[j])));
            }
        }
        s
    }
}

/// Greedy-decodes the case and returns the last decoder layer's
/// cross-attention (heads summed, rows normalized) over the decoded output.
pub fn dump_attention(
    model: &Transformer<f32>,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    case: &Case,
    order: &OrderSpec,
    max_out_len: usize,
) -> Result<AttentionRecord> {
    let x = vocab.encode(&build_prompt(case, catalog, order)?.input_text).ids;
    let out = model.greedy_decode(&x, max_out_len)?;
    let mut y = out.ids.clone();
    if !out.truncated {
        y.push(END_ID);
    }
    let att = model.cross_attention_map(&x, &shift_right(&y))?;
    let tokens = |ids: &[u32]| ids.iter().map(|&i| vocab.symbol(i).unwrap_or(UNK).to_string()).collect();
    Ok(AttentionRecord {
        case_id: case.id.clone(),
        input_tokens: tokens(&x),
        output_tokens: tokens(&y),
        matrix: (0..att.rows).map(|r| att.row(r).iter().map(|&v| v as f64).collect()).collect(),
    })
}

pub const TOP_ARTICLES: usize = 10;
pub const TOP_CHARGES: usize = 11;
/// Penalty errors larger than this many months define the error slice.
pub const ERROR_SLICE_MONTHS: u32 = 12;

/// PMI matrices for the three label pairs of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiSet {
    pub article_charge: PmiMatrix,
    pub article_penalty: PmiMatrix,
    pub charge_penalty: PmiMatrix,
}

impl PmiSet {
    pub fn named(&self) -> [(&'static str, &PmiMatrix); 3] {
        [
            ("article_charge", &self.article_charge),
            ("article_penalty", &self.article_penalty),
            ("charge_penalty", &self.charge_penalty),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiScenarios {
    pub ground_truth: PmiSet,
    pub predicted: PmiSet,
    /// `None` when no prediction misses the penalty by more than a year.
    pub mispredicted: Option<PmiSet>,
    pub slice_size: usize,
}

fn penalty_label(months: Option<u32>) -> Vec<String> {
    months.map(|m| vec![format!("bin_{}", bin_penalty(m))]).unwrap_or_default()
}

fn pmi_set(articles: &[Vec<String>], charges: &[Vec<String>], penalty: &[Vec<String>]) -> Result<PmiSet> {
    Ok(PmiSet {
        article_charge: pmi_matrix(articles, charges, TOP_ARTICLES, TOP_CHARGES)?,
        article_penalty: pmi_matrix(articles, penalty, TOP_ARTICLES, crate::metrics::N_PENALTY_BINS)?,
        charge_penalty: pmi_matrix(charges, penalty, TOP_CHARGES, crate::metrics::N_PENALTY_BINS)?,
    })
}

fn labels_of(preds: &[&TaskPredictions]) -> (Vec<Vec<String>>, Vec<Vec<String>>, Vec<Vec<String>>) {
    (
        preds.iter().map(|p| p.articles.clone().unwrap_or_default()).collect(),
        preds.iter().map(|p| p.charges.clone().unwrap_or_default()).collect(),
        preds.iter().map(|p| penalty_label(p.penalty_months)).collect(),
    )
}

/// Label PMI over (1) gold labels, (2) predicted labels and (3) predicted
/// labels of the cases whose penalty is off by more than a year.
pub fn pmi_scenarios(gold: &[Case], preds: &[TaskPredictions]) -> Result<PmiScenarios> {
    if gold.len() != preds.len() {
        return Err(Error::InvalidArgument(format!("{} cases but {} predictions", gold.len(), preds.len())));
    }
    let ground_truth = pmi_set(
        &gold.iter().map(|c| c.articles.clone()).collect::<Vec<_>>(),
        &gold.iter().map(|c| c.charges.clone()).collect::<Vec<_>>(),
        &gold.iter().map(|c| penalty_label(Some(c.penalty.months()))).collect::<Vec<_>>(),
    )?;
    let all: Vec<&TaskPredictions> = preds.iter().collect();
    let (a, c, p) = labels_of(&all);
    let predicted = pmi_set(&a, &c, &p)?;

    let ids: Vec<String> = gold.iter().map(|c| c.id.clone()).collect();
    let golds: Vec<u32> = gold.iter().map(|c| c.penalty.months()).collect();
    let pm: Vec<Option<u32>> = preds.iter().map(|p| p.penalty_months).collect();
    let slice: Vec<&String> = error_slice(&ids, &pm, &golds, ERROR_SLICE_MONTHS)?;
    let members: Vec<&TaskPredictions> =
        ids.iter().zip(preds).filter(|(id, _)| slice.contains(id)).map(|(_, p)| p).collect();
    let mispredicted = if members.is_empty() {
        log::warn!("no penalty error above {ERROR_SLICE_MONTHS} months; mispredicted PMI omitted");
        None
    } else {
        let (a, c, p) = labels_of(&members);
        Some(pmi_set(&a, &c, &p)?)
    };
    Ok(PmiScenarios { ground_truth, predicted, mispredicted, slice_size: members.len() })
}

/// Fraction of cells shared by both matrices (matched by label) whose PMI
/// has the same sign. Cells where either side is exactly zero count as equal.
pub fn sign_agreement(a: &PmiMatrix, b: &PmiMatrix) -> Option<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for (i, rl) in a.row_labels.iter().enumerate() {
        let Some(bi) = b.row_labels.iter().position(|l| l == rl) else { continue };
        for (j, cl) in a.col_labels.iter().enumerate() {
            let Some(bj) = b.col_labels.iter().position(|l| l == cl) else { continue };
            let (x, y) = (a.values[i][j], b.values[bi][bj]);
            total += 1;
            if x == 0.0 || y == 0.0 || (x > 0.0) == (y > 0.0) {
                same += 1;
            }
        }
    }
    (total > 0).then(|| same as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub case_id: String,
    pub forced_task: String,
    pub forced_span: String,
    pub before_text: String,
    pub after_text: String,
    /// Codes of tasks whose prediction changed.
    pub changed: Vec<String>,
    #[serde(skip)]
    pub before: TaskPredictions,
    #[serde(skip)]
    pub after: TaskPredictions,
}

fn check_span(task: TaskKind, span: &str, catalog: &LabelCatalog) -> Result<()> {
    let bad = || Error::InvalidArgument(format!("cannot parse `{span}` as a {task} span"));
    match task {
        TaskKind::Penalty => parse_penalty(span).map(|_| ()).ok_or_else(bad),
        TaskKind::Article | TaskKind::Charge => {
            let labels: Vec<&str> =
                span.split(crate::tokenizer::DELIM).map(str::trim).filter(|l| !l.is_empty()).collect();
            let known = |l: &str| match task {
                TaskKind::Article => catalog.article_index(l).is_some(),
                _ => catalog.charge_index(l).is_some(),
            };
            if labels.is_empty() || !labels.iter().all(|l| known(l)) {
                return Err(bad());
            }
            Ok(())
        }
        TaskKind::CourtView | TaskKind::ArticleContent => Ok(()),
    }
}

fn changed_tasks(order: &OrderSpec, a: &TaskPredictions, b: &TaskPredictions) -> Vec<String> {
    order
        .tasks()
        .iter()
        .filter(|t| {
            let (x, y) = (field(a, **t), field(b, **t));
            x != y
        })
        .map(|t| t.code().to_string())
        .collect()
}

fn field(p: &TaskPredictions, t: TaskKind) -> String {
    match t {
        TaskKind::Article => format!("{:?}", p.articles),
        TaskKind::Charge => format!("{:?}", p.charges),
        TaskKind::Penalty => format!("{:?}", p.penalty_months),
        TaskKind::CourtView => format!("{:?}", p.court_view),
        TaskKind::ArticleContent => format!("{:?}", p.article_content),
    }
}

/// Decodes the case, then decodes again with the model's own spans before
/// `task` kept and `task`'s span forced to `forced_span`; the remaining
/// tasks are decoded freely.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_replace(
    model: &Transformer<f32>,
    vocab: &Vocab,
    catalog: &LabelCatalog,
    case: &Case,
    order: &OrderSpec,
    task: TaskKind,
    forced_span: &str,
    max_out_len: usize,
) -> Result<Counterfactual> {
    let k = order.position(task).ok_or_else(|| Error::InvalidArgument(format!("task {task} is not in order {order}")))?;
    check_span(task, forced_span, catalog)?;
    let pt = build_prompt(case, catalog, order)?;
    let x = vocab.encode(&pt.input_text).ids;

    let before_text = decoded_text(vocab, &model.greedy_decode(&x, max_out_len)?);
    let spans = split_segments(&before_text).spans;
    if spans.len() < k {
        return Err(Error::InvalidArgument(format!("decoded output has {} spans, {k} needed before {task}", spans.len())));
    }
    let mut prefix: String = spans.iter().take(k).map(|(n, s)| format!("{}{s}", sentinel(*n))).collect();
    prefix.push_str(&sentinel(pt.sentinel_map[k].0));
    prefix.push_str(forced_span);
    let after = model.greedy_decode_with_prefix(&x, &vocab.encode(&prefix).ids, max_out_len)?;
    let after_text = decoded_text(vocab, &after);

    let before = parse_decoded(&before_text, order, catalog);
    let after = parse_decoded(&after_text, order, catalog);
    Ok(Counterfactual {
        case_id: case.id.clone(),
        forced_task: task.code().to_string(),
        forced_span: forced_span.to_string(),
        changed: changed_tasks(order, &before, &after),
        before_text,
        after_text,
        before,
        after,
    })
}

/// The gold span text for `task`, as the decoder would write it.
pub fn gold_span(case: &Case, catalog: &LabelCatalog, task: TaskKind) -> Result<String> {
    crate::prompting::task_surface(case, catalog, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_agreement_matches_by_label() {
        let a = PmiMatrix { row_labels: vec!["x".into(), "y".into()], col_labels: vec!["u".into()], values: vec![vec![1.0], vec![-1.0]] };
        let b = PmiMatrix { row_labels: vec!["y".into(), "x".into()], col_labels: vec!["u".into()], values: vec![vec![-0.5], vec![-0.1]] };
        assert_eq!(sign_agreement(&a, &b), Some(0.5));
    }
}
