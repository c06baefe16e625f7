//! Multi-label F1, penalty log-distance and binning, PMI matrices and error
//! slicing, plus the per-task evaluation report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelCatalog;
use crate::error::{Error, Result};
use crate::prompting::{TaskKind, TaskPredictions};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{a} predictions for {b} gold records")));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 over true/false positives and false negatives pooled across cases.
/// Each case's labels are treated as a set.
pub fn micro_f1<L: Eq + Hash>(preds: &[Vec<L>], golds: &[Vec<L>]) -> Result<f64> {
    check_len(preds.len(), golds.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: HashSet<&L> = p.iter().collect();
        let g: HashSet<&L> = g.iter().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-label F1 over `label_set`. A label that is never
/// predicted and never gold scores 0.
pub fn macro_f1<L: Eq + Hash>(preds: &[Vec<L>], golds: &[Vec<L>], label_set: &[L]) -> Result<f64> {
    check_len(preds.len(), golds.len())?;
    if label_set.is_empty() {
        return Err(Error::Empty("macro-F1 needs a nonempty label set"));
    }
    let mut counts: HashMap<&L, (usize, usize, usize)> = label_set.iter().map(|l| (l, (0, 0, 0))).collect();
    for (p, g) in preds.iter().zip(golds) {
        let p: HashSet<&L> = p.iter().collect();
        let g: HashSet<&L> = g.iter().collect();
        for l in p.union(&g) {
            if let Some(c) = counts.get_mut(l) {
                match (p.contains(l), g.contains(l)) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, true) => c.2 += 1,
                    (false, false) => {}
                }
            }
        }
    }
    // sum in label-set order so the result does not depend on hashing
    let mut seen = HashSet::new();
    let unique: Vec<&L> = label_set.iter().filter(|l| seen.insert(*l)).collect();
    let total: f64 = unique.iter().map(|l| {
        let (tp, fp, fn_) = counts[l];
        f1(tp, fp, fn_)
    }).sum();
    Ok(total / unique.len() as f64)
}

/// `|ln(pred + 1) - ln(gold + 1)|` in months.
pub fn log_distance(pred_months: f64, gold_months: f64) -> Result<f64> {
    if !(pred_months >= 0.0 && gold_months >= 0.0) || !pred_months.is_finite() || !gold_months.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "log-distance needs finite non-negative months, got ({pred_months}, {gold_months})"
        )));
    }
    Ok((pred_months.ln_1p() - gold_months.ln_1p()).abs())
}

/// Mean per-case log-distance; a missing prediction counts as 0 months.
pub fn mean_log_distance(preds: &[Option<u32>], golds: &[u32]) -> Result<f64> {
    check_len(preds.len(), golds.len())?;
    if golds.is_empty() {
        return Err(Error::Empty("no penalty records"));
    }
    let mut sum = 0.0;
    for (p, &g) in preds.iter().zip(golds) {
        sum += log_distance(p.unwrap_or(0) as f64, g as f64)?;
    }
    Ok(sum / golds.len() as f64)
}

/// Upper edges (inclusive) of penalty bins 0..=9; bin 10 is everything above.
pub const PENALTY_BIN_EDGES: [u32; 10] = [0, 6, 9, 12, 24, 36, 60, 84, 120, 300];
pub const N_PENALTY_BINS: usize = PENALTY_BIN_EDGES.len() + 1;

/// Bin index in `0..11`: `{0}`, `(0,6]`, `(6,9]`, `(9,12]`, `(12,24]`,
/// `(24,36]`, `(36,60]`, `(60,84]`, `(84,120]`, `(120,300]`, `(300,∞)`.
pub fn bin_penalty(months: u32) -> usize {
    PENALTY_BIN_EDGES.iter().position(|&e| months <= e).unwrap_or(PENALTY_BIN_EDGES.len())
}

/// Value used for label pairs that never co-occur.
pub const PMI_FLOOR: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `values[i][j]` is the PMI of `row_labels[i]` and `col_labels[j]`.
    pub values: Vec<Vec<f64>>,
}

impl PmiMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for c in &self.col_labels {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (r, row) in self.row_labels.iter().zip(&self.values) {
            s.push_str(r);
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// `ln p(x,y) / (p(x) p(y))` with probabilities estimated from per-case
/// occurrence counts over `n` cases.
pub fn pmi(joint: usize, count_x: usize, count_y: usize, n: usize) -> f64 {
    if joint == 0 || count_x == 0 || count_y == 0 || n == 0 {
        return PMI_FLOOR;
    }
    let n = n as f64;
    ((joint as f64 / n) / ((count_x as f64 / n) * (count_y as f64 / n))).ln()
}

/// PMI between the labels of two tasks, one label list per case per task.
/// Rows and columns are restricted to the `top_k_x` / `top_k_y` labels with
/// the largest total co-occurrence count (ties broken by label).
pub fn pmi_matrix(xs: &[Vec<String>], ys: &[Vec<String>], top_k_x: usize, top_k_y: usize) -> Result<PmiMatrix> {
    check_len(xs.len(), ys.len())?;
    if xs.is_empty() {
        return Err(Error::Empty("PMI needs at least one case"));
    }
    let mut cx: HashMap<&str, usize> = HashMap::new();
    let mut cy: HashMap<&str, usize> = HashMap::new();
    let mut joint: HashMap<(&str, &str), usize> = HashMap::new();
    for (x, y) in xs.iter().zip(ys) {
        let x: HashSet<&str> = x.iter().map(String::as_str).collect();
        let y: HashSet<&str> = y.iter().map(String::as_str).collect();
        for &a in &x {
            *cx.entry(a).or_default() += 1;
        }
        for &b in &y {
            *cy.entry(b).or_default() += 1;
        }
        for &a in &x {
            for &b in &y {
                *joint.entry((a, b)).or_default() += 1;
            }
        }
    }
    let top = |marg: &HashMap<&str, usize>, k: usize, row: bool| -> Vec<String> {
        let mut co: BTreeMap<&str, usize> = marg.keys().map(|&l| (l, 0)).collect();
        for (&(a, b), &c) in &joint {
            *co.get_mut(if row { a } else { b }).expect("label seen") += c;
        }
        let mut v: Vec<(&str, usize)> = co.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v.into_iter().take(k).map(|(l, _)| l.to_string()).collect()
    };
    let row_labels = top(&cx, top_k_x, true);
    let col_labels = top(&cy, top_k_y, false);
    let n = xs.len();
    let values = row_labels
        .iter()
        .map(|a| {
            col_labels
                .iter()
                .map(|b| pmi(joint.get(&(a.as_str(), b.as_str())).copied().unwrap_or(0), cx[a.as_str()], cy[b.as_str()], n))
                .collect()
        })
        .collect();
    Ok(PmiMatrix { row_labels, col_labels, values })
}

/// Ids of cases whose penalty is off by more than `threshold` months (a
/// missing prediction counts as 0 months).
pub fn error_slice<'a>(ids: &'a [String], preds: &[Option<u32>], golds: &[u32], threshold: u32) -> Result<Vec<&'a String>> {
    check_len(preds.len(), golds.len())?;
    check_len(ids.len(), golds.len())?;
    Ok(ids
        .iter()
        .zip(preds.iter().zip(golds))
        .filter(|(_, (p, g))| p.unwrap_or(0).abs_diff(**g) > threshold)
        .map(|(id, _)| id)
        .collect())
}

/// Position-wise character accuracy, pooled over cases: matching positions
/// over the longer of prediction and gold.
pub fn token_accuracy(preds: &[Option<String>], golds: &[String]) -> Result<f64> {
    check_len(preds.len(), golds.len())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let p: Vec<char> = p.as_deref().unwrap_or("").chars().collect();
        let g: Vec<char> = g.chars().collect();
        hit += p.iter().zip(&g).filter(|(a, b)| a == b).count();
        total += p.len().max(g.len());
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_distance: Option<f64>,
    /// Penalty bin accuracy (11 bins).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    pub cases: usize,
    /// Cases where this task's span was absent.
    pub missing: usize,
}

impl TaskReport {
    /// Normalized score in `[0, 1]`: micro-F1 for label tasks,
    /// `exp(-log_distance)` for the penalty, token accuracy otherwise.
    pub fn score(&self) -> f64 {
        self.micro_f1
            .or(self.log_distance.map(|d| (-d).exp()))
            .or(self.token_accuracy)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskReport>,
    pub cases: usize,
    pub malformed: usize,
    pub elapsed_secs: f64,
}

impl MetricsReport {
    pub fn task(&self, task: TaskKind) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task.code())
    }

    /// Mean of per-task scores (see [`TaskReport::score`]).
    pub fn mean_score(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.iter().map(TaskReport::score).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Scores `preds` against `golds` on each task in `tasks`.
pub fn evaluate(
    preds: &[TaskPredictions],
    golds: &[TaskPredictions],
    tasks: &[TaskKind],
    catalog: &LabelCatalog,
) -> Result<MetricsReport> {
    check_len(preds.len(), golds.len())?;
    let mut reports = Vec::new();
    for &task in tasks {
        let missing = preds.iter().filter(|p| !p.has(task)).count();
        let mut r = TaskReport {
            task: task.code().to_string(),
            micro_f1: None,
            macro_f1: None,
            log_distance: None,
            bin_accuracy: None,
            token_accuracy: None,
            cases: golds.len(),
            missing,
        };
        let labels = |f: fn(&TaskPredictions) -> &Option<Vec<String>>| -> (Vec<Vec<String>>, Vec<Vec<String>>) {
            (
                preds.iter().map(|p| f(p).clone().unwrap_or_default()).collect(),
                golds.iter().map(|g| f(g).clone().unwrap_or_default()).collect(),
            )
        };
        match task {
            TaskKind::Article | TaskKind::Charge => {
                let (p, g, set) = if task == TaskKind::Article {
                    let (p, g) = labels(|t| &t.articles);
                    (p, g, catalog.article_ids())
                } else {
                    let (p, g) = labels(|t| &t.charges);
                    (p, g, catalog.charges.clone())
                };
                r.micro_f1 = Some(micro_f1(&p, &g)?);
                r.macro_f1 = Some(macro_f1(&p, &g, &set)?);
            }
            TaskKind::Penalty => {
                let p: Vec<Option<u32>> = preds.iter().map(|t| t.penalty_months).collect();
                let g: Vec<u32> = golds
                    .iter()
                    .map(|t| t.penalty_months.ok_or(Error::InvalidArgument("gold record lacks a penalty".into())))
                    .collect::<Result<_>>()?;
                if !g.is_empty() {
                    r.log_distance = Some(mean_log_distance(&p, &g)?);
                    let hits = p.iter().zip(&g).filter(|(p, g)| bin_penalty(p.unwrap_or(0)) == bin_penalty(**g)).count();
                    r.bin_accuracy = Some(hits as f64 / g.len() as f64);
                }
            }
            TaskKind::CourtView | TaskKind::ArticleContent => {
                let pick = |t: &TaskPredictions| -> Option<String> {
                    if task == TaskKind::CourtView { t.court_view.clone() } else { t.article_content.clone() }
                };
                let p: Vec<Option<String>> = preds.iter().map(pick).collect();
                let g: Vec<String> = golds.iter().map(|t| pick(t).unwrap_or_default()).collect();
                r.token_accuracy = Some(token_accuracy(&p, &g)?);
            }
        }
        reports.push(r);
    }
    Ok(MetricsReport {
        tasks: reports,
        cases: golds.len(),
        malformed: preds.iter().filter(|p| p.malformed).count(),
        elapsed_secs: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn micro_f1_hand_case() {
        let preds = vec![v(&["a"]), v(&["b", "c"])];
        let golds = vec![v(&["a", "b"]), v(&["b"])];
        assert!((micro_f1(&preds, &golds).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(micro_f1(&golds, &golds).unwrap(), 1.0);
        assert_eq!(micro_f1(&[v(&[]), v(&[])], &golds).unwrap(), 0.0);
        assert!(micro_f1(&preds[..1], &golds).is_err());
    }

    #[test]
    fn macro_f1_zero_support_convention() {
        let golds = vec![v(&["a"]), v(&["a"])];
        assert_eq!(macro_f1(&golds, &golds, &v(&["a", "b"])).unwrap(), 0.5);
        assert_eq!(macro_f1(&golds, &golds, &v(&["a"])).unwrap(), 1.0);
        assert!(macro_f1(&golds, &golds, &v(&[])).is_err());
    }

    #[test]
    fn log_distance_values() {
        assert_eq!(log_distance(36.0, 36.0).unwrap(), 0.0);
        assert_eq!(log_distance(0.0, 0.0).unwrap(), 0.0);
        assert!((log_distance(350.0, 36.0).unwrap() - 2.2497).abs() < 1e-3);
        assert!(log_distance(-1.0, 3.0).is_err());
        assert_eq!(mean_log_distance(&[None], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn penalty_bins() {
        assert_eq!(bin_penalty(0), 0);
        assert_eq!(bin_penalty(1), 1);
        assert_eq!(bin_penalty(6), 1);
        assert_eq!(bin_penalty(7), 2);
        assert_eq!(bin_penalty(300), 9);
        assert_eq!(bin_penalty(301), 10);
        assert_eq!(bin_penalty(350), 10);
        assert_eq!(N_PENALTY_BINS, 11);
    }

    #[test]
    fn pmi_hand_case_and_floor() {
        let xs = vec![v(&["x"]), v(&[]), v(&["x"]), v(&[])];
        let ys = vec![v(&["y"]), v(&["z"]), v(&["y"]), v(&["z"])];
        let m = pmi_matrix(&xs, &ys, 5, 5).unwrap();
        assert_eq!(m.row_labels, v(&["x"]));
        assert_eq!(m.col_labels, v(&["y", "z"]));
        assert!((m.values[0][0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(m.values[0][1], PMI_FLOOR);
        assert!(m.to_csv().starts_with("label,y,z\nx,0.693147,"));
    }

    #[test]
    fn error_slice_threshold() {
        let ids = v(&["a", "b", "c"]);
        let out = error_slice(&ids, &[Some(37), Some(36), Some(350)], &[24, 24, 36], 12).unwrap();
        assert_eq!(out, vec![&ids[0], &ids[2]]);
    }

    #[test]
    fn token_accuracy_penalizes_length() {
        assert_eq!(token_accuracy(&[Some("abcd".into())], &["abcd".into()]).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[Some("ab".into())], &["abcd".into()]).unwrap(), 0.5);
        assert_eq!(token_accuracy(&[None], &["ab".into()]).unwrap(), 0.0);
    }
}
