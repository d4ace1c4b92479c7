//! One-vs-rest average precision per class, mean AP, and run comparison.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ActionLabelSpace;
use crate::error::{Error, Result};

/// Post-softmax scores, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    scores: Array2<f64>,
    gt_labels: Vec<usize>,
}

impl ScoreTable {
    pub fn new(scores: Array2<f64>, gt_labels: Vec<usize>) -> Result<Self> {
        let (n, c) = scores.dim();
        if n == 0 {
            return Err(Error::EmptyTable);
        }
        if gt_labels.len() != n {
            return Err(Error::mismatch(n, gt_labels.len()));
        }
        if let Some(&bad) = gt_labels.iter().find(|&&g| g >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        for (i, row) in scores.rows().into_iter().enumerate() {
            let sum = row.sum();
            if !sum.is_finite() || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Config(format!("score row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(ScoreTable { scores, gt_labels })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn gt_labels(&self) -> &[usize] {
        &self.gt_labels
    }

    pub fn num_classes(&self) -> usize {
        self.scores.ncols()
    }

    pub fn len(&self) -> usize {
        self.gt_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_labels.is_empty()
    }
}

/// All-points average precision: the mean, over positives, of the precision
/// at each positive's rank. Samples are ranked by descending score, ties
/// broken by original index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "scores and labels must align");
    let num_pos = positives.iter().filter(|&&p| p).count();
    if num_pos == 0 {
        return None;
    }
    let order = ranking(scores);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / num_pos as f64)
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub per_class_support: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_attention_in_mask: Option<f64>,
}

impl EvalReport {
    pub fn num_classes(&self) -> usize {
        self.per_class_ap.len()
    }

    pub fn undefined_classes(&self) -> Vec<usize> {
        self.per_class_ap
            .iter()
            .enumerate()
            .filter_map(|(c, ap)| ap.is_none().then_some(c))
            .collect()
    }

    /// One line per class (`name support AP`) followed by the mean.
    pub fn to_text(&self, labels: Option<&ActionLabelSpace>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>8} {:>8}", "class", "support", "AP");
        for (c, (ap, support)) in self.per_class_ap.iter().zip(&self.per_class_support).enumerate() {
            let name = labels
                .and_then(|l| l.name(c))
                .map(str::to_string)
                .unwrap_or_else(|| format!("class_{c}"));
            let ap = ap.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{name:<24} {support:>8} {ap:>8}");
        }
        let _ = writeln!(out, "mAP {:.4}", self.map);
        if let Some(a) = self.mean_attention_in_mask {
            let _ = writeln!(out, "mean attention_in_mask {a:.4}");
        }
        out
    }
}

/// Per-class AP of each score column against the `gt == c` indicator.
pub fn evaluate(table: &ScoreTable) -> Result<EvalReport> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let c = table.num_classes();
    let mut per_class_ap = Vec::with_capacity(c);
    let mut per_class_support = Vec::with_capacity(c);
    for class in 0..c {
        let scores: Vec<f64> = table.scores.column(class).to_vec();
        let positives: Vec<bool> = table.gt_labels.iter().map(|&g| g == class).collect();
        per_class_support.push(positives.iter().filter(|&&p| p).count());
        let ap = average_precision(&scores, &positives);
        if ap.is_none() {
            log::warn!("class {class} has no positives; excluded from mAP");
        }
        per_class_ap.push(ap);
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map,
        per_class_support,
        mean_attention_in_mask: None,
    })
}

/// `(class, ap_a - ap_b)` for classes defined in both, largest gain first.
pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<Vec<(usize, f64)>> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::ClassCountMismatch {
            left: a.num_classes(),
            right: b.num_classes(),
        });
    }
    let mut deltas: Vec<(usize, f64)> = a
        .per_class_ap
        .iter()
        .zip(&b.per_class_ap)
        .enumerate()
        .filter_map(|(c, (x, y))| Some((c, (*x)? - (*y)?)))
        .collect();
    deltas.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
    Ok(deltas)
}

/// Two-column, tab-separated table of [`compare_runs`] output.
pub fn deltas_to_tsv(deltas: &[(usize, f64)], labels: Option<&ActionLabelSpace>) -> String {
    let mut out = String::from("class\tap_delta\n");
    for &(c, d) in deltas {
        let name = labels
            .and_then(|l| l.name(c))
            .map(str::to_string)
            .unwrap_or_else(|| c.to_string());
        let _ = writeln!(out, "{name}\t{d}");
    }
    out
}
