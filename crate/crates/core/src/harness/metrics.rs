//! Scoring: confusion matrices, balanced accuracy, leaderboard sums.

use crate::error::{Error, Result};

/// `counts[t][p]` = number of samples with true class `t` predicted as `p`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.is_empty() {
        return Err(Error::EmptyInput("confusion_matrix"));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            op: "confusion_matrix",
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!(
                "label out of range: true {t} / pred {p} with {classes} classes"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(counts)
}

/// Recall per class; `None` for classes with no true samples.
pub fn per_class_recall(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let support: usize = row.iter().sum();
            if support == 0 {
                None
            } else {
                Some(row[t] as f64 / support as f64)
            }
        })
        .collect()
}

/// Unweighted mean of per-class recall over the classes present in `y_true`.
/// Classes that never occur as a true label are excluded from the mean.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let classes = y_true
        .iter()
        .chain(y_pred)
        .max()
        .map(|&m| m + 1)
        .ok_or(Error::EmptyInput("balanced_accuracy"))?;
    let confusion = confusion_matrix(y_true, y_pred, classes)?;
    balanced_accuracy_from_confusion(&confusion)
}

/// Same metric computed from an existing confusion matrix; the report module
/// cross-checks the two routes against each other.
pub fn balanced_accuracy_from_confusion(confusion: &[Vec<usize>]) -> Result<f64> {
    let recalls: Vec<f64> = per_class_recall(confusion).into_iter().flatten().collect();
    if recalls.is_empty() {
        return Err(Error::EmptyInput("balanced_accuracy"));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Competition-style final score: the plain sum of per-task scores.
pub fn leaderboard_score(task_scores: &[f64]) -> f64 {
    task_scores.iter().sum()
}
