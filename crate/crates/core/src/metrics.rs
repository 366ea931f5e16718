//! Classification metrics shared by model evaluation and reports.
//!
//! All metrics operate on single-label predictions. Micro-averaged F1 pools
//! true/false positives over classes, which for single-label data collapses
//! to plain accuracy; macro-averaged F1 is the unweighted mean of per-class
//! F1 scores with the following conventions:
//!
//! * a class absent from both the truth and the predictions is skipped;
//! * a class absent from the truth but present in the predictions counts
//!   with an F1 of zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy and F1 scores for one evaluation split, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

impl Metrics {
    /// Arithmetic mean of a non-empty set of metric triples.
    pub fn mean(items: &[Metrics]) -> Result<Metrics> {
        if items.is_empty() {
            return Err(Error::EmptySplit("metrics mean"));
        }
        let n = items.len() as f64;
        Ok(Metrics {
            accuracy: items.iter().map(|m| m.accuracy).sum::<f64>() / n,
            micro_f1: items.iter().map(|m| m.micro_f1).sum::<f64>() / n,
            macro_f1: items.iter().map(|m| m.macro_f1).sum::<f64>() / n,
        })
    }
}

/// Compute accuracy, micro-F1, and macro-F1 from label/prediction pairs.
///
/// `truth` and `predicted` must have equal non-zero length and every entry
/// must lie in `0..classes`.
pub fn classification_metrics(
    truth: &[usize],
    predicted: &[usize],
    classes: usize,
) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            what: "metrics labels vs predictions",
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptySplit("classification metrics"));
    }
    if classes == 0 {
        return Err(Error::InvalidDimension("classes must be >= 1".into()));
    }
    for &label in truth.iter().chain(predicted.iter()) {
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
    }

    let mut true_pos = vec![0usize; classes];
    let mut false_pos = vec![0usize; classes];
    let mut false_neg = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(predicted.iter()) {
        if t == p {
            true_pos[t] += 1;
        } else {
            false_neg[t] += 1;
            false_pos[p] += 1;
        }
    }

    let correct: usize = true_pos.iter().sum();
    let accuracy = correct as f64 / truth.len() as f64;

    let tp: usize = true_pos.iter().sum();
    let fp: usize = false_pos.iter().sum();
    let fn_: usize = false_neg.iter().sum();
    let micro_f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };

    let mut f1_sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let support = true_pos[c] + false_neg[c];
        if support == 0 && false_pos[c] == 0 {
            continue; // class plays no role in this split
        }
        counted += 1;
        if support > 0 {
            let denom = (2 * true_pos[c] + false_pos[c] + false_neg[c]) as f64;
            f1_sum += 2.0 * true_pos[c] as f64 / denom;
        }
        // support == 0 with false positives contributes 0.0
    }
    let macro_f1 = if counted == 0 {
        0.0
    } else {
        f1_sum / counted as f64
    };

    Ok(Metrics {
        accuracy,
        micro_f1,
        macro_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const TOL: f64 = 1e-12;

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = [0, 1, 2, 3, 2, 1];
        let m = classification_metrics(&labels, &labels, 4).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.micro_f1, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn ten_sample_confusion_matches_hand_tabulation() {
        // Confusion counts per class (tp, fp, fn):
        //   0: (2, 1, 1)  F1 = 4/6
        //   1: (1, 1, 1)  F1 = 2/4
        //   2: (3, 1, 1)  F1 = 6/8
        //   3: (1, 0, 0)  F1 = 1
        // accuracy = 7/10, macro F1 = (2/3 + 1/2 + 3/4 + 1)/4 = 35/48
        let truth = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
        let predicted = [0, 1, 0, 1, 2, 2, 2, 0, 2, 3];
        let m = classification_metrics(&truth, &predicted, 4).unwrap();
        assert!((m.accuracy - 0.7).abs() < TOL);
        assert!((m.micro_f1 - 0.7).abs() < TOL);
        assert!((m.macro_f1 - 35.0 / 48.0).abs() < TOL);
    }

    #[test]
    fn class_absent_everywhere_is_skipped() {
        let truth = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
        let predicted = [0, 1, 0, 1, 2, 2, 2, 0, 2, 3];
        // Same ten samples but declared over 5 classes; class 4 never occurs
        // and must not dilute the macro average.
        let m = classification_metrics(&truth, &predicted, 5).unwrap();
        assert!((m.macro_f1 - 35.0 / 48.0).abs() < TOL);
    }

    #[test]
    fn class_predicted_but_never_true_counts_as_zero() {
        // Class 2 is never a true label but gets predicted once: its F1 of 0
        // enters the macro mean, giving (2/3 + 1 + 0)/3 = 5/9.
        let truth = [0, 0, 1];
        let predicted = [0, 2, 1];
        let m = classification_metrics(&truth, &predicted, 3).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < TOL);
        assert!((m.micro_f1 - 2.0 / 3.0).abs() < TOL);
        assert!((m.macro_f1 - 5.0 / 9.0).abs() < TOL);
    }

    #[test]
    fn micro_f1_equals_accuracy_on_random_single_label_data() {
        let mut rng = crate::seed::rng(991);
        for _ in 0..200 {
            let classes = rng.random_range(2..8usize);
            let n = rng.random_range(1..40usize);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let predicted: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let m = classification_metrics(&truth, &predicted, classes).unwrap();
            assert_eq!(m.micro_f1, m.accuracy);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(classification_metrics(&[0, 1], &[0], 2).is_err());
        assert!(classification_metrics(&[], &[], 2).is_err());
        assert!(classification_metrics(&[0, 5], &[0, 1], 3).is_err());
    }

    #[test]
    fn mean_averages_componentwise() {
        let a = Metrics {
            accuracy: 0.5,
            micro_f1: 0.5,
            macro_f1: 0.25,
        };
        let b = Metrics {
            accuracy: 1.0,
            micro_f1: 1.0,
            macro_f1: 0.75,
        };
        let m = Metrics::mean(&[a, b]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.macro_f1, 0.5);
        assert!(Metrics::mean(&[]).is_err());
    }
}
