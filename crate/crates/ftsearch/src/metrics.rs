//! Evaluation metrics: rank-statistic ROC-AUC for multi-task masked
//! classification, RMSE for regression, and the serialized report.

use crate::error::{FtError, Result};
use crate::model::TaskType;
use serde::{Deserialize, Serialize};

/// ROC-AUC of one task via the Mann-Whitney rank statistic: the probability
/// that a random positive outranks a random negative, ties counted 0.5.
/// Requires at least one positive and one negative.
pub fn roc_auc_single(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos: f64 = labels.iter().filter(|&&l| l > 0.5).count() as f64;
    let neg = n as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied score groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Some((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Per-task ROC-AUC over masked multi-task scores (row-major [n, tasks]).
/// Tasks without both classes present are skipped (None); errors if every
/// task is skipped.
pub fn roc_auc(
    scores: &[f64],
    labels: &[f64],
    mask: &[bool],
    num_tasks: usize,
) -> Result<Vec<Option<f64>>> {
    if num_tasks == 0 || scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(FtError::Data("roc_auc input length mismatch".into()));
    }
    let mut per_task = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for row in 0..scores.len() / num_tasks {
            let i = row * num_tasks + t;
            if mask[i] {
                s.push(scores[i]);
                l.push(labels[i]);
            }
        }
        per_task.push(roc_auc_single(&s, &l));
    }
    if per_task.iter().all(|t| t.is_none()) {
        return Err(FtError::Data("no evaluable task".into()));
    }
    Ok(per_task)
}

/// Root mean squared error over unmasked entries of one task.
pub fn rmse_single(preds: &[f64], labels: &[f64]) -> Option<f64> {
    if preds.is_empty() {
        return None;
    }
    let mse: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / preds.len() as f64;
    Some(mse.sqrt())
}

/// Per-task RMSE over masked multi-task predictions.
pub fn rmse(
    preds: &[f64],
    labels: &[f64],
    mask: &[bool],
    num_tasks: usize,
) -> Result<Vec<Option<f64>>> {
    if num_tasks == 0 || preds.len() != labels.len() || preds.len() != mask.len() {
        return Err(FtError::Data("rmse input length mismatch".into()));
    }
    let mut per_task = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut p = Vec::new();
        let mut l = Vec::new();
        for row in 0..preds.len() / num_tasks {
            let i = row * num_tasks + t;
            if mask[i] {
                p.push(preds[i]);
                l.push(labels[i]);
            }
        }
        per_task.push(rmse_single(&p, &l));
    }
    if per_task.iter().all(|t| t.is_none()) {
        return Err(FtError::Data("no evaluable task".into()));
    }
    Ok(per_task)
}

/// Mean over evaluable tasks; the dataset-level aggregate.
pub fn aggregate(per_task: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = per_task.iter().flatten().copied().collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Metric for logits + labels of one task type: mean ROC-AUC for
/// classification (scores through the logistic), mean RMSE for regression.
pub fn evaluate(
    logits: &[f64],
    labels: &[f64],
    mask: &[bool],
    num_tasks: usize,
    task: TaskType,
) -> Result<(f64, Vec<Option<f64>>)> {
    let per_task = match task {
        TaskType::Classification => {
            let scores: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            roc_auc(&scores, labels, mask, num_tasks)?
        }
        TaskType::Regression => rmse(logits, labels, mask, num_tasks)?,
    };
    Ok((aggregate(&per_task), per_task))
}

/// Whether `a` is a better aggregate than `b` for the task type.
pub fn improves(task: TaskType, a: f64, b: f64) -> bool {
    match task {
        TaskType::Classification => a > b,
        TaskType::Regression => a < b,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Test-split evaluation of a fine-tuned model plus its training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_type: TaskType,
    pub aggregate: f64,
    pub per_task: Vec<Option<f64>>,
    pub history: Vec<EpochRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation_gives_one() {
        let auc = roc_auc_single(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let auc = roc_auc_single(&[0.5, 0.5, 0.5, 0.5], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn pair_counting_example() {
        // Over all 4 positive-negative pairs, 3 are ordered correctly.
        let auc = roc_auc_single(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_task_skipped_all_skipped_errors() {
        let out = roc_auc(&[0.2, 0.4, 0.3, 0.6], &[1.0, 0.0, 1.0, 1.0], &[true; 4], 2).unwrap();
        // task 0 labels: 1.0, 1.0 -> skipped; task 1 labels: 0.0, 1.0 -> scored
        assert!(out[0].is_none());
        assert!(out[1].is_some());

        let err = roc_auc(&[0.2, 0.4], &[1.0, 1.0], &[true, true], 1).unwrap_err();
        assert!(err.to_string().contains("no evaluable task"));
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse_single(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = rmse_single(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - (25.0f64 / 2.0).sqrt()).abs() < 1e-12);
        // constant offset c gives |c|
        let v = rmse_single(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_are_excluded() {
        let auc = roc_auc(
            &[0.9, 0.1, 0.2, 0.8],
            &[0.0, 1.0, 0.0, 1.0],
            &[false, true, true, true],
            1,
        )
        .unwrap();
        // Row 0 masked out; remaining scores [0.1, 0.2, 0.8], labels [1,0,1].
        let direct = roc_auc_single(&[0.1, 0.2, 0.8], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(auc[0].unwrap(), direct);
    }
}
