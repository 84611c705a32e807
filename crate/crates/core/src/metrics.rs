//! ROC AUC by pair counting and support-weighted F1.

use serde::Serialize;

use crate::error::{Error, Result};

/// Mann–Whitney AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` over all pairs.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not comparable")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("binary label expected, got {l}")));
    }
    let mut items: Vec<(f64, usize)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUC needs both classes present".into()));
    }
    // twice the U statistic, kept integral
    let mut u2: u64 = 0;
    let mut below_neg: u64 = 0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        let group = &items[i..j];
        let pos = group.iter().filter(|x| x.1 == 1).count() as u64;
        let neg = group.len() as u64 - pos;
        u2 += pos * (2 * below_neg + neg);
        below_neg += neg;
        i = j;
    }
    Ok(u2 as f64 / (2 * positives as u64 * negatives as u64) as f64)
}

/// One-vs-rest AUC averaged over classes; equals [`roc_auc`] on the
/// positive-class column for two classes.
pub fn macro_auc(probabilities: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes == 2 {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
        return roc_auc(&scores, labels);
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        total += roc_auc(&scores, &binary)?;
    }
    Ok(total / num_classes as f64)
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Metric(format!(
                "class index out of range ({p}, {l}) for {num_classes} classes"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 with the `0` convention when precision + recall is zero,
/// averaged with class-support weights.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion_matrix(predictions, labels, num_classes)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = m[c][c] as f64;
        let support: u64 = m[c].iter().sum();
        let predicted: u64 = m.iter().map(|row| row[c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

/// Row-wise softmax of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: usize,
    pub predicted: usize,
    /// Probability of class 1 for binary tasks, of the predicted class
    /// otherwise.
    pub score: f64,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub auc: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_slide: Vec<SlidePrediction>,
}

impl EvalResult {
    pub fn from_logits(
        slides: &[(String, usize, Vec<f64>)],
        num_classes: usize,
    ) -> Result<Self> {
        let mut per_slide = Vec::with_capacity(slides.len());
        for (id, label, logits) in slides {
            if logits.len() != num_classes {
                return Err(Error::dim("slide logits", &[num_classes], &[logits.len()]));
            }
            let probabilities = softmax(logits);
            let predicted = argmax(logits);
            let score = if num_classes == 2 {
                probabilities[1]
            } else {
                probabilities[predicted]
            };
            per_slide.push(SlidePrediction {
                slide_id: id.clone(),
                label: *label,
                predicted,
                score,
                probabilities,
            });
        }
        let labels: Vec<usize> = per_slide.iter().map(|p| p.label).collect();
        let predictions: Vec<usize> = per_slide.iter().map(|p| p.predicted).collect();
        let probs: Vec<Vec<f64>> = per_slide.iter().map(|p| p.probabilities.clone()).collect();
        Ok(Self {
            auc: macro_auc(&probs, &labels, num_classes)?,
            weighted_f1: weighted_f1(&predictions, &labels, num_classes)?,
            confusion: confusion_matrix(&predictions, &labels, num_classes)?,
            per_slide,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
    }

    #[test]
    fn auc_monotone_invariance_and_complement() {
        let s = [0.3, -1.2, 2.5, 0.7, 0.1, 1.9];
        let l = [0, 0, 1, 1, 0, 1];
        let a = roc_auc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|x: &f64| x.exp() * 3.0 + 1.0).collect();
        assert_eq!(a, roc_auc(&t, &l).unwrap());
        let flipped: Vec<usize> = l.iter().map(|x| 1 - x).collect();
        assert!((a + roc_auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(weighted_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        let f = weighted_f1(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        let f = weighted_f1(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn f1_equals_accuracy_on_balanced_symmetric_errors() {
        // one error each way between classes 0 and 1, supports equal
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let preds = [0, 0, 0, 1, 1, 1, 1, 0];
        let f = weighted_f1(&preds, &labels, 2).unwrap();
        assert!((f - 0.75).abs() < 1e-15);
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let m = confusion_matrix(&[0, 2, 1, 1], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(m.iter().map(|r| r.iter().sum::<u64>()).collect::<Vec<_>>(), vec![1, 2, 1]);
    }

    #[test]
    fn constant_logits_give_half_auc() {
        let slides: Vec<(String, usize, Vec<f64>)> =
            (0..6).map(|i| (format!("s{i}"), i % 2, vec![0.3, 0.3])).collect();
        let r = EvalResult::from_logits(&slides, 2).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn multiclass_macro_auc() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.6, 0.3, 0.1],
        ];
        assert_eq!(macro_auc(&probs, &[0, 1, 2, 0], 3).unwrap(), 1.0);
    }
}
