use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::prediction::{decide, Decision};

/// Number of points on the accuracy–reject curve (thresholds 0, 0.01, …, 1).
pub const CURVE_POINTS: usize = 101;

/// Mean per-class recall. Classes with no members in `labels` are left out
/// of the mean.
pub fn balanced_accuracy(decisions: &[usize], labels: &[usize], m: usize) -> Result<f64> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(Error::EmptySet);
    }
    let mut hits = vec![0usize; m];
    let mut totals = vec![0usize; m];
    for (&d, &y) in decisions.iter().zip(labels) {
        totals[y] += 1;
        hits[y] += (d == y) as usize;
    }
    let present: Vec<f64> = (0..m)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn accuracy(decisions: &[usize], labels: &[usize]) -> Result<f64> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(Error::EmptySet);
    }
    let hits = decisions.iter().zip(labels).filter(|(d, y)| d == y).count();
    Ok(hits as f64 / decisions.len() as f64)
}

/// `(1/w) Σ_i Σ_c (π_ic − y_ic)²` over `w` subjects.
pub fn brier(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || probs.nrows() != labels.len() {
        return Err(Error::EmptySet);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..probs.ncols() {
            let target = if c == y { 1.0 } else { 0.0 };
            total += (probs[(i, c)] - target).powi(2);
        }
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceTest {
    pub correct: usize,
    pub total: usize,
    /// Probability that a decision is correct by chance.
    pub chance_rate: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub above_chance: bool,
    /// Set when an expected count is below 5.
    pub low_power: bool,
}

/// χ² goodness-of-fit (1 degree of freedom) of the correct/incorrect counts
/// against chance. The chance rate is `Σ_c prior_c · q_c`, where `q_c` is the
/// fraction of decisions naming class `c`: the hit rate of a classifier that
/// predicts with the observed frequencies independently of the truth.
pub fn chance_test(decisions: &[usize], labels: &[usize], class_priors: &[f64]) -> Result<ChanceTest> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(Error::EmptySet);
    }
    let total = decisions.len();
    let m = class_priors.len();
    let mut predicted = vec![0usize; m];
    for &d in decisions {
        predicted[d] += 1;
    }
    let chance_rate: f64 = (0..m)
        .map(|c| class_priors[c] * predicted[c] as f64 / total as f64)
        .sum();
    let correct = decisions.iter().zip(labels).filter(|(d, y)| d == y).count();
    let expected_hit = total as f64 * chance_rate;
    let expected_miss = total as f64 - expected_hit;
    let wrong = (total - correct) as f64;
    let mut statistic = 0.0;
    for (obs, exp) in [(correct as f64, expected_hit), (wrong, expected_miss)] {
        if exp > 0.0 {
            statistic += (obs - exp).powi(2) / exp;
        } else if obs > 0.0 {
            statistic = f64::INFINITY;
        }
    }
    let p_value = if statistic.is_finite() {
        ChiSquared::new(1.0)
            .expect("one degree of freedom")
            .sf(statistic)
    } else {
        0.0
    };
    Ok(ChanceTest {
        correct,
        total,
        chance_rate,
        statistic,
        p_value,
        above_chance: correct as f64 > expected_hit,
        low_power: expected_hit < 5.0 || expected_miss < 5.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub rejection_rate: f64,
    /// `None` when every subject is rejected.
    pub balanced_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Rejection rate and accuracy on the retained subjects at thresholds
/// 0, 0.01, …, 1. A subject is rejected when its largest class probability
/// does not exceed the threshold.
pub fn accuracy_reject_curve(probs: &DMatrix<f64>, labels: &[usize]) -> Vec<CurvePoint> {
    let m = probs.ncols();
    let rows: Vec<Vec<f64>> = probs.row_iter().map(|r| r.iter().copied().collect()).collect();
    let best: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| {
            let c = decide(r, 0.0).class().unwrap_or(0);
            (c, r[c])
        })
        .collect();
    (0..CURVE_POINTS)
        .map(|k| {
            let t = k as f64 / (CURVE_POINTS - 1) as f64;
            let (mut dec, mut lab) = (Vec::new(), Vec::new());
            for (&(c, p), &y) in best.iter().zip(labels) {
                if p > t {
                    dec.push(c);
                    lab.push(y);
                }
            }
            let n = labels.len().max(1);
            CurvePoint {
                threshold: t,
                rejection_rate: (labels.len() - dec.len()) as f64 / n as f64,
                balanced_accuracy: balanced_accuracy(&dec, &lab, m).ok(),
                accuracy: accuracy(&dec, &lab).ok(),
            }
        })
        .collect()
}

/// Decisions with no rejection, as class indices.
pub fn hard_decisions(probs: &DMatrix<f64>) -> Vec<usize> {
    probs
        .row_iter()
        .map(|r| {
            let row: Vec<f64> = r.iter().copied().collect();
            match decide(&row, 0.0) {
                Decision::Class(c) => c,
                Decision::Reject => unreachable!("threshold 0 never rejects"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_of_small_confusion() {
        // rows true class, columns predicted: [[3,1],[2,2]]
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let decisions = [0, 0, 0, 1, 0, 0, 1, 1];
        assert_eq!(balanced_accuracy(&decisions, &labels, 2).unwrap(), 0.625);
    }

    #[test]
    fn recall_one_and_zero_average_to_half() {
        let labels = [0, 0, 0, 0, 0, 0, 0, 1];
        let decisions = [0; 8];
        assert_eq!(balanced_accuracy(&decisions, &labels, 2).unwrap(), 0.5);
    }

    #[test]
    fn absent_classes_are_excluded() {
        assert_eq!(balanced_accuracy(&[0, 1], &[0, 1], 4).unwrap(), 1.0);
    }

    #[test]
    fn uniform_four_class_brier() {
        let probs = DMatrix::from_element(5, 4, 0.25);
        assert_eq!(brier(&probs, &[0, 1, 2, 3, 0]).unwrap(), 0.75);
    }

    #[test]
    fn empty_sets_are_errors() {
        assert!(matches!(balanced_accuracy(&[], &[], 2), Err(Error::EmptySet)));
        assert!(matches!(brier(&DMatrix::zeros(0, 2), &[]), Err(Error::EmptySet)));
        assert!(matches!(chance_test(&[], &[], &[0.5, 0.5]), Err(Error::EmptySet)));
    }

    #[test]
    fn perfect_record_is_far_above_chance() {
        let labels: Vec<usize> = (0..62).map(|i| i % 4).collect();
        let t = chance_test(&labels, &labels, &[0.25; 4]).unwrap();
        assert!(t.p_value < 1e-3 && t.above_chance && !t.low_power);
    }

    #[test]
    fn single_decision_is_low_power() {
        let t = chance_test(&[1], &[1], &[0.5, 0.5]).unwrap();
        assert!(t.low_power && t.statistic.is_finite());
    }

    #[test]
    fn curve_has_fixed_grid() {
        let probs = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, 0.4, 0.6, 0.5, 0.5]);
        let curve = accuracy_reject_curve(&probs, &[0, 0, 1]);
        assert_eq!(curve.len(), 101);
        assert_eq!(curve[0].rejection_rate, 0.0);
        assert_eq!(curve[100].rejection_rate, 1.0);
        assert!(curve[100].accuracy.is_none());
        assert!(curve.windows(2).all(|w| w[0].rejection_rate <= w[1].rejection_rate));
    }
}
