//! One-to-one assignment of predicted boxes to ground truth.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, BoundingBox};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Loss and matching-cost coefficients for the L1, GIoU and confidence terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 1e-3, gamma: 0.1 }
    }
}

/// Mean absolute difference of the four center-size coordinates.
pub fn l1_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| libm::fabs(x - y)).sum::<f64>() / 4.0
}

/// `gts x preds` cost matrix: `alpha*L1 + beta*(1 - GIoU) + gamma*(-log conf)`.
pub fn cost_matrix(preds: &[(BoundingBox, f64)], gts: &[BoundingBox], w: LossWeights) -> Matrix {
    let mut c = Matrix::zeros(gts.len(), preds.len());
    for (i, gt) in gts.iter().enumerate() {
        for (j, (p, conf)) in preds.iter().enumerate() {
            let cls = -libm::log(conf.max(1e-12));
            let v = w.alpha * l1_distance(p, gt) + w.beta * (1.0 - giou(p, gt)) + w.gamma * cls;
            c.set(i, j, v);
        }
    }
    c
}

/// Ground-truth to prediction assignment; unmatched predictions are "no object".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(pred_index, gt_index)`, ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub n_preds: usize,
}

impl Assignment {
    pub fn is_matched(&self, pred: usize) -> bool {
        self.pairs.iter().any(|&(p, _)| p == pred)
    }

    /// Per prediction: `true` when matched to some ground truth.
    pub fn matched_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_preds];
        for &(p, _) in &self.pairs {
            m[p] = true;
        }
        m
    }

    /// Sum of `cost[gt][pred]` over the pairs, in ground-truth order.
    pub fn total_cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost.get(g, p)).sum()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns the column chosen for each row.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian needs rows <= cols");
    if n == 0 {
        return Vec::new();
    }
    // potentials and augmenting paths, 1-indexed with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

pub fn match_predictions(preds: &[(BoundingBox, f64)], gts: &[BoundingBox], w: LossWeights) -> Result<Assignment> {
    if gts.len() > preds.len() {
        return Err(Error::contract(format!(
            "{} ground-truth boxes but only {} predictions",
            gts.len(),
            preds.len()
        )));
    }
    let cost = cost_matrix(preds, gts, w);
    let cols = hungarian(&cost);
    Ok(Assignment { pairs: cols.into_iter().enumerate().map(|(g, p)| (p, g)).collect(), n_preds: preds.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::from_corners(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn overlapping_pred_wins() {
        let gt = bx(0.1, 0.1, 0.5, 0.5);
        let preds = [(bx(0.12, 0.1, 0.5, 0.48), 0.6), (bx(0.7, 0.7, 0.9, 0.9), 0.6)];
        let a = match_predictions(&preds, &[gt], LossWeights::default()).unwrap();
        assert_eq!(a.pairs, [(0, 0)]);
        assert_eq!(a.matched_mask(), [true, false]);
    }

    #[test]
    fn no_ground_truth() {
        let preds = [(bx(0.1, 0.1, 0.5, 0.5), 0.6)];
        let a = match_predictions(&preds, &[], LossWeights::default()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.matched_mask(), [false]);
    }

    #[test]
    fn too_many_ground_truths() {
        let b = bx(0.1, 0.1, 0.5, 0.5);
        assert!(match_predictions(&[(b, 0.5)], &[b, b], LossWeights::default()).is_err());
    }

    #[test]
    fn hungarian_classic() {
        let c = Matrix::from_rows(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]);
        let cols = hungarian(&c);
        let total: f64 = cols.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        assert_eq!(total, 5.0);
    }
}
