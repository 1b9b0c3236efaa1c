use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::CostMatrix;
use crate::measures::JointMeasure;
use crate::{Error, Result};

/// `C[i, k] = |a_i - b_k|^2`.
pub fn squared_euclidean_cost(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::Input(format!(
            "point clouds have widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (mut row, ai) in out.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
        for (c, bk) in row.iter_mut().zip(b.axis_iter(Axis(0))) {
            *c = Zip::from(&ai).and(&bk).fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
        }
    }
    CostMatrix::new(out)
}

/// Joint ground cost between source atoms `i` and target atoms `k`:
/// `|z_i - z_k|^2 + beta * CE(p_k, y_i)` where `CE(p, y) = -sum_c y_c ln p_c`.
///
/// Probabilities are floored at the smallest normal `f64` inside the log so
/// mismatched one-hot labels give a large finite cost.
pub fn joint_cost_matrix(src: &JointMeasure, tgt: &JointMeasure, beta: f64) -> Result<CostMatrix> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!(
            "beta must be a finite nonnegative value, got {beta}"
        )));
    }
    if src.n_classes() != tgt.n_classes() {
        return Err(Error::Input(format!(
            "class counts differ: {} vs {}",
            src.n_classes(),
            tgt.n_classes()
        )));
    }
    let dist = squared_euclidean_cost(src.embeddings(), tgt.embeddings())?.into_inner();
    if beta == 0.0 {
        return CostMatrix::new(dist);
    }
    let log_p = tgt.label_dists().mapv(|p| p.max(f64::MIN_POSITIVE).ln());
    let ce = src.label_dists().dot(&log_p.t());
    let mut out = dist;
    Zip::from(&mut out)
        .and(&ce)
        .for_each(|c, &l| *c = (*c - beta * l).max(0.0));
    CostMatrix::new(out)
}
