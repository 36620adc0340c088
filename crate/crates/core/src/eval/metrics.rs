use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true labels, columns predicted labels, both in `labels` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<i64>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[i64]) -> Self {
        Self {
            labels: labels.to_vec(),
            counts: vec![vec![0; labels.len()]; labels.len()],
        }
    }

    fn position(&self, label: i64) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| Error::Validation(format!("label {label} not in {:?}", self.labels)))
    }

    pub fn add(&mut self, truth: i64, predicted: i64) -> Result<()> {
        let (i, j) = (self.position(truth)?, self.position(predicted)?);
        self.counts[i][j] += 1;
        Ok(())
    }

    pub fn from_pairs(labels: &[i64], pairs: impl IntoIterator<Item = (i64, i64)>) -> Result<Self> {
        let mut m = Self::new(labels);
        for (t, p) in pairs {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<i64, f64>,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, per-class F1 and their unweighted mean over every declared label.
/// A class with no true and no predicted instances scores F1 = 0.
pub fn compute_metrics(matrix: &ConfusionMatrix) -> Result<Metrics> {
    let n = matrix.labels.len();
    if n == 0 || matrix.counts.len() != n || matrix.counts.iter().any(|r| r.len() != n) {
        return Err(Error::Validation("confusion matrix shape does not match its labels".into()));
    }
    let total = matrix.total();
    if total == 0 {
        return Err(Error::Validation("confusion matrix is empty".into()));
    }
    let trace: u64 = (0..n).map(|i| matrix.counts[i][i]).sum();
    let mut per_class_f1 = BTreeMap::new();
    for (k, label) in matrix.labels.iter().enumerate() {
        let tp = matrix.counts[k][k];
        let predicted: u64 = (0..n).map(|i| matrix.counts[i][k]).sum();
        let actual: u64 = matrix.counts[k].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        per_class_f1.insert(*label, f1);
    }
    let macro_f1 = per_class_f1.values().sum::<f64>() / n as f64;
    Ok(Metrics {
        accuracy: ratio(trace, total),
        macro_f1,
        per_class_f1,
        support: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_diagonal() {
        let m = ConfusionMatrix::from_pairs(&[0, 1, 2], [(0, 0), (1, 1), (2, 2), (2, 2)]).unwrap();
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.per_class_f1.values().all(|f| *f == 1.0));
    }

    #[test]
    fn hand_binary_case() {
        let m = ConfusionMatrix {
            labels: vec![0, 1],
            counts: vec![vec![1, 1], vec![1, 1]],
        };
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class_f1[&0], 0.5);
        assert_eq!(r.per_class_f1[&1], 0.5);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn zero_support_class_counts_as_zero() {
        let m = ConfusionMatrix::from_pairs(&[0, 1, 2, 3], [(0, 0), (1, 1), (2, 2)]).unwrap();
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.per_class_f1[&3], 0.0);
        assert_eq!(r.macro_f1, 0.75);
    }

    #[test]
    fn empty_is_error() {
        assert!(compute_metrics(&ConfusionMatrix::new(&[0, 1])).is_err());
        assert!(ConfusionMatrix::from_pairs(&[0, 1], [(0, 5)]).is_err());
    }

    proptest! {
        #[test]
        fn binary_macro_between_class_scores(counts in proptest::collection::vec(0u64..20, 4)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let m = ConfusionMatrix {
                labels: vec![0, 1],
                counts: vec![counts[..2].to_vec(), counts[2..].to_vec()],
            };
            let r = compute_metrics(&m).unwrap();
            let (a, b) = (r.per_class_f1[&0], r.per_class_f1[&1]);
            prop_assert!(r.macro_f1 <= a.max(b) + 1e-15);
            prop_assert!(r.macro_f1 >= a.min(b) - 1e-15);
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
        }
    }
}
