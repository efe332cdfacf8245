use crate::error::{OncoError, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(OncoError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(OncoError::Domain(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(OncoError::UndefinedMetric(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in `O(n log n)`.
pub fn auroc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_pos += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// ROC operating points from a descending threshold sweep: one point per
/// distinct score, plus `(0, 0)` and `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    Ok(pts)
}

/// Trapezoidal area under a curve given as `(x, y)` points sorted by `x`.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// TPR at `fpr` on a ROC curve, taking the upper envelope at vertical steps.
pub fn tpr_at(points: &[(f64, f64)], fpr: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if fpr < x0 || fpr > x1 {
            continue;
        }
        let y = if x1 > x0 { y0 + (y1 - y0) * (fpr - x0) / (x1 - x0) } else { y1 };
        best = best.max(y);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi && !yj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn worked_examples() {
        let y = [true, true, false, false];
        assert_eq!(auroc_binary(&[0.9, 0.8, 0.3, 0.1], &y).unwrap(), 1.0);
        assert_eq!(auroc_binary(&[0.9, 0.3, 0.8, 0.1], &y).unwrap(), 0.75);
        assert_eq!(auroc_binary(&[0.5; 4], &y).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let err = auroc_binary(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert!(matches!(err, OncoError::UndefinedMetric(_)));
    }

    #[test]
    fn matches_pairwise_count_with_ties() {
        let s = [0.3, 0.3, 0.1, 0.7, 0.3, 0.7, 0.2];
        let y = [true, false, false, true, true, false, false];
        assert_eq!(auroc_binary(&s, &y).unwrap(), brute(&s, &y));
    }

    #[test]
    fn trapezoid_of_roc_equals_auroc() {
        let s = [0.3, 0.3, 0.1, 0.7, 0.3, 0.7, 0.2, 0.9];
        let y = [true, false, false, true, true, false, false, true];
        let roc = roc_curve(&s, &y).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        assert!((trapezoid(&roc) - auroc_binary(&s, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tpr_interpolation() {
        let roc = [(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)];
        assert_eq!(tpr_at(&roc, 0.0), 0.5);
        assert_eq!(tpr_at(&roc, 0.25), 0.75);
        assert_eq!(tpr_at(&roc, 1.0), 1.0);
    }
}
