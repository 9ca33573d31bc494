//! Task metrics reported alongside the training loss.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::losses::Targets;

/// Coefficient of determination averaged over output columns.
pub fn r_squared(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != y.shape() || y.nrows() == 0 {
        return Err(Error::input("r² needs equally shaped, nonempty inputs"));
    }
    let mut total = 0.0;
    for j in 0..y.ncols() {
        let col = y.column(j);
        let mean = col.mean();
        let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = col.iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / y.ncols() as f64)
}

/// Predicted class per row: sign of the logit for one column, argmax otherwise.
pub fn predicted_classes(pred: &DMatrix<f64>) -> Vec<usize> {
    pred.row_iter()
        .map(|r| {
            if r.len() == 1 {
                usize::from(r[0] > 0.0)
            } else {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            }
        })
        .collect()
}

pub fn accuracy(pred: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if pred.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::input("accuracy needs one nonempty prediction row per label"));
    }
    let hits = predicted_classes(pred).iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve of `scores` for `positive`, with tied scores
/// counted as half. `None` when one class is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Binary AUC of the logit, or the mean one-vs-rest AUC over classes present.
pub fn auc_ovr(pred: &DMatrix<f64>, targets: &Targets) -> Result<Option<f64>> {
    let Targets::Labels { labels, n_classes } = targets else {
        return Err(Error::input("AUC needs class labels"));
    };
    if pred.nrows() != labels.len() {
        return Err(Error::input("AUC needs one prediction row per label"));
    }
    if pred.ncols() == 1 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return Ok(auc(pred.column(0).as_slice(), &pos));
    }
    let aucs: Vec<f64> = (0..*n_classes)
        .filter_map(|c| {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc(pred.column(c).as_slice(), &pos)
        })
        .collect();
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.1, 0.4, 0.4, 0.9, -0.3, 0.4, 2.0, 0.0];
        let pos = [false, true, false, true, false, true, true, false];
        assert!((auc(&scores, &pos).unwrap() - brute_auc(&scores, &pos)).abs() < 1e-15);
        assert_eq!(auc(&[1.0, 2.0], &[true, true]), None);
        assert_eq!(auc(&[0.0, 1.0], &[false, true]), Some(1.0));
    }

    #[test]
    fn accuracy_and_r2() {
        let pred = DMatrix::from_row_slice(3, 1, &[0.5, -1.0, 2.0]);
        assert!((accuracy(&pred, &[1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let logits = DMatrix::from_row_slice(2, 3, &[0.1, 0.5, 0.2, 3.0, 0.0, 1.0]);
        assert_eq!(predicted_classes(&logits), vec![1, 0]);
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        let mean = DMatrix::from_element(3, 1, 2.0);
        assert_eq!(r_squared(&mean, &y).unwrap(), 0.0);
    }
}
