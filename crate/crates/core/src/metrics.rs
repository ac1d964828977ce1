//! Accuracy, Discrimination, Consistency and Delta.
//!
//! Fairness metrics read only predicted labels; Accuracy is the only metric
//! that looks at ground truth.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("protected attribute has only one group present (need both 0 and 1)")]
    SingleGroup,
    #[error("{what}: length {left} does not match {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("k = {k} must satisfy 1 <= k < n = {n}")]
    InvalidK { k: usize, n: usize },
    #[error("delta needs at least one discrimination value")]
    EmptyDiscriminations,
    #[error("value {value} at position {index} is not a binary label")]
    NotBinary { index: usize, value: u8 },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_binary(v: &[u8]) -> Result<()> {
    match v.iter().position(|&x| x > 1) {
        Some(index) => Err(MetricsError::NotBinary {
            index,
            value: v[index],
        }),
        None => Ok(()),
    }
}

/// `|mean(ŷ | a = 1) − mean(ŷ | a = 0)|`.
pub fn discrimination(predicted: &[u8], group: &[u8]) -> Result<f64> {
    if predicted.len() != group.len() {
        return Err(MetricsError::LengthMismatch {
            what: "discrimination",
            left: predicted.len(),
            right: group.len(),
        });
    }
    check_binary(predicted)?;
    check_binary(group)?;
    let (mut sum1, mut n1, mut sum0, mut n0) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &a) in predicted.iter().zip(group) {
        if a == 1 {
            sum1 += p as usize;
            n1 += 1;
        } else {
            sum0 += p as usize;
            n0 += 1;
        }
    }
    if n0 == 0 || n1 == 0 {
        return Err(MetricsError::SingleGroup);
    }
    Ok((sum1 as f64 / n1 as f64 - sum0 as f64 / n0 as f64).abs())
}

pub fn accuracy(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            what: "accuracy",
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Accuracy minus the mean discrimination over protected attributes.
pub fn delta(accuracy: f64, discriminations: &[f64]) -> Result<f64> {
    if discriminations.is_empty() {
        return Err(MetricsError::EmptyDiscriminations);
    }
    if let [d] = discriminations {
        return Ok(accuracy - d);
    }
    let mean = discriminations.iter().sum::<f64>() / discriminations.len() as f64;
    Ok(accuracy - mean)
}

/// The k nearest rows of every row (Euclidean, never itself), nearest
/// first, equal distances ordered by row index.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    k: usize,
    indices: Vec<Vec<usize>>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn of(&self, row: usize) -> &[usize] {
        &self.indices[row]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.indices
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

/// Exact k-NN by exhaustive search with a bounded max-heap per row. Rows
/// are processed in parallel.
pub fn knn_indices(x: &Tensor, k: usize) -> Result<Neighbors> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(MetricsError::InvalidK { k, n });
    }
    let indices = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dist: f64 = xi
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let cand = Candidate { dist, index: j };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(cand);
                }
            }
            heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
        })
        .collect();
    Ok(Neighbors { k, indices })
}

/// `1 − mean_i |ŷ_i − mean_{j ∈ kNN(i)} ŷ_j|` with precomputed neighbors.
pub fn consistency_with(predicted: &[u8], neighbors: &Neighbors) -> Result<f64> {
    if predicted.len() != neighbors.len() {
        return Err(MetricsError::LengthMismatch {
            what: "consistency",
            left: predicted.len(),
            right: neighbors.len(),
        });
    }
    check_binary(predicted)?;
    let k = neighbors.k() as f64;
    let total: f64 = neighbors
        .rows()
        .iter()
        .zip(predicted)
        .map(|(nbrs, &p)| {
            let mean = nbrs.iter().map(|&j| predicted[j] as f64).sum::<f64>() / k;
            (p as f64 - mean).abs()
        })
        .sum();
    Ok(1.0 - total / predicted.len() as f64)
}

pub fn consistency(predicted: &[u8], x: &Tensor, k: usize) -> Result<f64> {
    if predicted.len() != x.rows() {
        return Err(MetricsError::LengthMismatch {
            what: "consistency",
            left: predicted.len(),
            right: x.rows(),
        });
    }
    consistency_with(predicted, &knn_indices(x, k)?)
}

/// Everything the metrics need about one model on one split.
#[derive(Clone, Debug)]
pub struct PredictionSet<'a> {
    pub predicted: &'a [u8],
    pub truth: &'a [u8],
    /// One column per protected attribute.
    pub groups: &'a [Vec<u8>],
    pub neighbors: &'a Neighbors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub discrimination: Vec<f64>,
    pub delta: f64,
    pub consistency: f64,
}

impl MetricsReport {
    pub fn mean_discrimination(&self) -> f64 {
        self.discrimination.iter().sum::<f64>() / self.discrimination.len().max(1) as f64
    }
}

pub fn metrics_report(preds: &PredictionSet<'_>) -> Result<MetricsReport> {
    let accuracy = accuracy(preds.predicted, preds.truth)?;
    let discrimination = preds
        .groups
        .iter()
        .map(|a| discrimination(preds.predicted, a))
        .collect::<Result<Vec<_>>>()?;
    let delta = delta(accuracy, &discrimination)?;
    let consistency = consistency_with(preds.predicted, preds.neighbors)?;
    Ok(MetricsReport {
        accuracy,
        discrimination,
        delta,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn discrimination_examples() {
        assert_eq!(discrimination(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(discrimination(&[1, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.0);
        assert_eq!(discrimination(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn discrimination_rejects_single_group() {
        assert_eq!(
            discrimination(&[1, 0, 1], &[1, 1, 1]).unwrap_err(),
            MetricsError::SingleGroup
        );
        assert!(discrimination(&[1, 0], &[1]).is_err());
        assert!(discrimination(&[2, 0], &[1, 0]).is_err());
    }

    #[test]
    fn knn_small_example() {
        let nb = knn_indices(&column(&[0.0, 1.0, 10.0]), 1).unwrap();
        assert_eq!(nb.rows(), &[vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        // rows 1 and 2 are identical, both at distance 1 from row 0
        let nb = knn_indices(&column(&[0.0, 1.0, 1.0, -1.0]), 1).unwrap();
        assert_eq!(nb.of(0), &[1]);
        assert_eq!(nb.of(1), &[2]);
        assert_eq!(nb.of(2), &[1]);
    }

    #[test]
    fn knn_exhaustive_k() {
        let nb = knn_indices(&column(&[3.0, -1.0, 0.5, 8.0]), 3).unwrap();
        for i in 0..4 {
            let mut got = nb.of(i).to_vec();
            got.sort_unstable();
            let expect: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn knn_rejects_large_k() {
        assert_eq!(
            knn_indices(&column(&[0.0, 1.0]), 2).unwrap_err(),
            MetricsError::InvalidK { k: 2, n: 2 }
        );
        assert!(knn_indices(&column(&[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn consistency_examples() {
        let x = column(&[0.0, 1.0, 10.0]);
        assert_eq!(consistency(&[1, 1, 1], &x, 1).unwrap(), 1.0);
        let c = consistency(&[1, 1, 0], &x, 1).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-15);

        // two separated pairs, each pair sharing its label
        let x = column(&[0.0, 0.0, 100.0, 100.0]);
        assert_eq!(consistency(&[1, 1, 0, 0], &x, 1).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta(0.7543, &[0.0]).unwrap(), 0.7543);
        assert_eq!(delta(0.6, &[0.0]).unwrap(), 0.6);
        assert_eq!(delta(0.9, &[0.25]).unwrap(), 0.9 - 0.25);
        assert_eq!(delta(0.5, &[]).unwrap_err(), MetricsError::EmptyDiscriminations);
    }

    #[test]
    fn report_on_constant_predictions() {
        let x = column(&[0.0, 1.0, 2.0, 3.0]);
        let nb = knn_indices(&x, 2).unwrap();
        let groups = vec![vec![0, 1, 0, 1]];
        let r = metrics_report(&PredictionSet {
            predicted: &[1, 1, 1, 1],
            truth: &[1, 1, 1, 1],
            groups: &groups,
            neighbors: &nb,
        })
        .unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.discrimination, vec![0.0]);
        assert_eq!(r.consistency, 1.0);
        assert_eq!(r.delta, 1.0);

        let missing = vec![vec![1, 1, 1, 1]];
        assert!(metrics_report(&PredictionSet {
            predicted: &[1, 1, 1, 1],
            truth: &[1, 1, 1, 1],
            groups: &missing,
            neighbors: &nb,
        })
        .is_err());
    }
}
