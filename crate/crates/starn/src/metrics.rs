//! Classification metrics for imbalanced severity data: confusion counts,
//! F1 family, balanced accuracy, pairwise ROC-AUC, per-class AUPRC, Cohen's
//! kappa, and the least-squares scaling fit used by the runtime benchmark.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Result, StarnError};

/// Row-major confusion counts: `confusion[true][pred]`.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(StarnError::shape(
            "confusion_matrix",
            format!("{} truths vs {} predictions", y_true.len(), y_pred.len()),
        ));
    }
    let mut conf = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(StarnError::Config(format!(
                "label {} outside {} classes",
                t.max(p),
                num_classes
            )));
        }
        conf[t][p] += 1;
    }
    Ok(conf)
}

fn row_sum(conf: &[Vec<usize>], c: usize) -> usize {
    conf[c].iter().sum()
}

fn col_sum(conf: &[Vec<usize>], c: usize) -> usize {
    conf.iter().map(|row| row[c]).sum()
}

/// Per-class precision, recall, and F1 with the 0/0 -> 0 convention for
/// empty denominators.
pub fn per_class_prf(conf: &[Vec<usize>]) -> Vec<(f64, f64, f64)> {
    (0..conf.len())
        .map(|c| {
            let tp = conf[c][c] as f64;
            let pred = col_sum(conf, c) as f64;
            let truth = row_sum(conf, c) as f64;
            let precision = if pred > 0.0 { tp / pred } else { 0.0 };
            let recall = if truth > 0.0 { tp / truth } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            (precision, recall, f1)
        })
        .collect()
}

/// Unweighted mean of per-class F1 over every class, absent ones included
/// at zero.
pub fn macro_f1(conf: &[Vec<usize>]) -> f64 {
    let prf = per_class_prf(conf);
    prf.iter().map(|&(_, _, f1)| f1).sum::<f64>() / prf.len() as f64
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(conf: &[Vec<usize>]) -> f64 {
    let prf = per_class_prf(conf);
    let total: usize = (0..conf.len()).map(|c| row_sum(conf, c)).sum();
    if total == 0 {
        return 0.0;
    }
    prf.iter()
        .enumerate()
        .map(|(c, &(_, _, f1))| f1 * row_sum(conf, c) as f64)
        .sum::<f64>()
        / total as f64
}

/// Mean per-class recall over the classes that actually occur in the truth.
pub fn balanced_accuracy(conf: &[Vec<usize>]) -> f64 {
    let prf = per_class_prf(conf);
    let present: Vec<f64> = (0..conf.len())
        .filter(|&c| row_sum(conf, c) > 0)
        .map(|c| prf[c].1)
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Recall of the highest class index. `None` when that class never occurs,
/// so a missing severe stratum reads as absent rather than as failure.
pub fn severe_recall(conf: &[Vec<usize>]) -> Option<f64> {
    let c = conf.len() - 1;
    let truth = row_sum(conf, c);
    (truth > 0).then(|| conf[c][c] as f64 / truth as f64)
}

/// Chance-corrected agreement from the confusion marginals. The fully
/// degenerate case (expected agreement 1) reports 0.
pub fn cohens_kappa(conf: &[Vec<usize>]) -> f64 {
    let n: usize = conf.iter().map(|r| r.iter().sum::<usize>()).sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let po: f64 = (0..conf.len()).map(|c| conf[c][c] as f64).sum::<f64>() / nf;
    let pe: f64 = (0..conf.len())
        .map(|c| (row_sum(conf, c) as f64 / nf) * (col_sum(conf, c) as f64 / nf))
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        return 0.0;
    }
    (po - pe) / (1.0 - pe)
}

/// Rank-based AUC of `scores` for the positive entries, counting score
/// ties as half. `None` when either side is empty.
pub fn binary_auc(is_positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    let n_neg = is_positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Average ranks over tied score groups, then the Mann-Whitney statistic.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if is_positive[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-one multiclass ROC-AUC: each class pair is scored on its own
/// samples with the pair-normalized probability, both directions averaged,
/// and pairs weighted by combined support. Pairs missing a side are skipped.
pub fn roc_auc_ovo_weighted(y_true: &[usize], probs: &Tensor<f64>) -> Result<Option<f64>> {
    let classes = probs.cols();
    if y_true.len() != probs.rows() {
        return Err(StarnError::shape(
            "roc_auc",
            format!("{} labels vs {} probability rows", y_true.len(), probs.rows()),
        ));
    }
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for a in 0..classes {
        for b in (a + 1)..classes {
            let idx: Vec<usize> = (0..y_true.len())
                .filter(|&i| y_true[i] == a || y_true[i] == b)
                .collect();
            let n_a = idx.iter().filter(|&&i| y_true[i] == a).count();
            let n_b = idx.len() - n_a;
            if n_a == 0 || n_b == 0 {
                log::warn!("class pair ({}, {}) lacks one side; skipped in AUC", a, b);
                continue;
            }
            let pair_score = |i: usize, pos: usize, neg: usize| {
                let (pa, pb) = (probs.at(i, pos), probs.at(i, neg));
                if pa + pb > 0.0 {
                    pa / (pa + pb)
                } else {
                    0.5
                }
            };
            let labels_a: Vec<bool> = idx.iter().map(|&i| y_true[i] == a).collect();
            let scores_a: Vec<f64> = idx.iter().map(|&i| pair_score(i, a, b)).collect();
            let auc_ab = binary_auc(&labels_a, &scores_a).unwrap();
            let labels_b: Vec<bool> = idx.iter().map(|&i| y_true[i] == b).collect();
            let scores_b: Vec<f64> = idx.iter().map(|&i| pair_score(i, b, a)).collect();
            let auc_ba = binary_auc(&labels_b, &scores_b).unwrap();
            let w = (n_a + n_b) as f64;
            weighted += w * 0.5 * (auc_ab + auc_ba);
            total_weight += w;
        }
    }
    Ok((total_weight > 0.0).then(|| weighted / total_weight))
}

/// Step-wise average precision: walk thresholds from the highest score,
/// accumulating precision at each recall increment. Tied scores move as one
/// block so sample order cannot matter. `None` without positives.
pub fn average_precision(is_positive: &[bool], scores: &[f64]) -> Option<f64> {
    let total_pos = is_positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut block_tp = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if is_positive[order[j]] {
                block_tp += 1;
            }
            j += 1;
        }
        let prev_tp = tp;
        tp += block_tp;
        seen += j - i;
        if block_tp > 0 {
            let precision = tp as f64 / seen as f64;
            let recall_step = (tp - prev_tp) as f64 / total_pos as f64;
            ap += precision * recall_step;
        }
        i = j;
    }
    Some(ap)
}

/// One-vs-rest AUPRC for each class; `None` where the class has no true
/// instances.
pub fn auprc_per_class(y_true: &[usize], probs: &Tensor<f64>) -> Result<Vec<Option<f64>>> {
    if y_true.len() != probs.rows() {
        return Err(StarnError::shape(
            "auprc",
            format!("{} labels vs {} probability rows", y_true.len(), probs.rows()),
        ));
    }
    Ok((0..probs.cols())
        .map(|c| {
            let labels: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
            let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.at(i, c)).collect();
            average_precision(&labels, &scores)
        })
        .collect())
}

/// Highest-probability class per row; ties resolve to the lowest index.
pub fn argmax_rows(probs: &Tensor<f64>) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: Option<f64>,
    pub support: usize,
}

/// The full evaluation bundle, serializable as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub confusion: Vec<Vec<usize>>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub balanced_accuracy: f64,
    pub severe_recall: Option<f64>,
    pub roc_auc_weighted: Option<f64>,
    pub cohens_kappa: f64,
    pub per_class: Vec<ClassReport>,
    /// Classes with neither true nor predicted instances, whose F1 is 0 by
    /// convention rather than by measurement.
    pub degenerate_classes: Vec<usize>,
}

impl MetricsReport {
    /// Confusion matrix as CSV with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("true\\pred");
        for c in 0..k {
            out.push_str(&format!(",{}", c));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Computes every report field from labels and class probabilities,
/// deriving hard predictions by row argmax.
pub fn evaluate(y_true: &[usize], probs: &Tensor<f64>, num_classes: usize) -> Result<MetricsReport> {
    if probs.cols() != num_classes {
        return Err(StarnError::shape(
            "evaluate",
            format!("{} probability columns for {} classes", probs.cols(), num_classes),
        ));
    }
    let y_pred = argmax_rows(probs);
    let conf = confusion_matrix(y_true, &y_pred, num_classes)?;
    let prf = per_class_prf(&conf);
    let auprc = auprc_per_class(y_true, probs)?;
    let per_class: Vec<ClassReport> = (0..num_classes)
        .map(|c| ClassReport {
            precision: prf[c].0,
            recall: prf[c].1,
            f1: prf[c].2,
            auprc: auprc[c],
            support: row_sum(&conf, c),
        })
        .collect();
    let degenerate_classes: Vec<usize> = (0..num_classes)
        .filter(|&c| row_sum(&conf, c) == 0 && col_sum(&conf, c) == 0)
        .collect();
    Ok(MetricsReport {
        samples: y_true.len(),
        macro_f1: macro_f1(&conf),
        weighted_f1: weighted_f1(&conf),
        balanced_accuracy: balanced_accuracy(&conf),
        severe_recall: severe_recall(&conf),
        roc_auc_weighted: roc_auc_ovo_weighted(y_true, probs)?,
        cohens_kappa: cohens_kappa(&conf),
        per_class,
        degenerate_classes,
        confusion: conf,
    })
}

/// Ordinary least squares of `ys` on `xs`: returns (slope, intercept, R²).
/// Zero response variance fits a flat line with R² = 0 by convention.
pub fn scaling_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(StarnError::Config(format!(
            "scaling fit needs at least 2 paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(StarnError::Config(
            "scaling fit needs at least two distinct sizes".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|&y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}
