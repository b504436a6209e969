//! Evaluation metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("ROC-AUC needs both classes among the labels")]
    SingleClass,
    #[error("every entry is masked")]
    AllMasked,
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
}

fn check(pred: &[f64], target: &[f64]) -> Result<(), MetricError> {
    if pred.len() != target.len() {
        return Err(MetricError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::AllMasked);
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    Ok(mse(pred, target)?.sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic, using average
/// ranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so that tie averages stay integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                pos_rank_sum2 += avg_rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Metric values per target plus their mean over the targets that could be
/// evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// `None` for targets that were skipped (single class or no labels).
    pub per_target: Vec<Option<f64>>,
    pub mean: f64,
    /// Number of (prediction, target) pairs that entered the metric.
    pub count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts concordant and tied positive/negative pairs directly; the
    /// result is exact as a fraction `num2 / (2 * pos * neg)`.
    fn pair_count(scores: &[f64], labels: &[bool]) -> (u64, u64) {
        let mut num2 = 0;
        let mut pairs = 0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        num2 += 2;
                    } else if scores[i] == scores[j] {
                        num2 += 1;
                    }
                }
            }
        }
        (num2, 2 * pairs)
    }

    #[test]
    fn simple_auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.3, 0.2], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn regression_metrics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[], &[]), Err(MetricError::AllMasked));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..200),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 * 0.25).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            match roc_auc(&scores, &labels) {
                Ok(auc) => {
                    let (num, den) = pair_count(&scores, &labels);
                    prop_assert_eq!(auc, num as f64 / den as f64);
                }
                Err(e) => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l), "{:?}", e),
            }
        }
    }
}
