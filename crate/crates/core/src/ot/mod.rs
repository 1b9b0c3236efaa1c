//! Discrete optimal transport between weighted point clouds.

mod cost;
mod exact;
mod simplex;
mod sinkhorn;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::{Error, Result};

pub use cost::{joint_cost_matrix, squared_euclidean_cost};
pub use exact::solve_exact;
pub use simplex::project_simplex;
pub use sinkhorn::{solve_sinkhorn, Sinkhorn};

/// Tolerance on the total mass of each marginal.
const MARGINAL_MASS_TOL: f64 = 1e-9;

/// Nonnegative, finite ground-cost matrix (`sources x targets`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input("cost matrix is empty".into()));
        }
        if let Some(((i, k), v)) = entries.indexed_iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Input(format!(
                "cost entry ({i}, {k}) = {v} is not a finite nonnegative value"
            )));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.0.fold(0.0, |m, &v| m.max(v))
    }

    pub fn transposed(&self) -> Self {
        Self(self.0.t().to_owned())
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Solver that produced a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtMethod {
    Exact,
    Sinkhorn { eps: f64 },
}

/// Sinkhorn stopped at `max_iter` with the marginal violation still above `tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceWarning {
    pub iterations: usize,
    /// L1 row-marginal violation before the final rounding step.
    pub violation: f64,
}

/// A coupling between two discrete measures with its dual potentials.
///
/// Duals are centered: `sum_i mu_i u_i = 0`, so they are reproducible
/// despite being defined only up to an additive constant.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    /// `sum_ik coupling_ik * C_ik`.
    pub cost: f64,
    pub dual_u: Array1<f64>,
    pub dual_v: Array1<f64>,
    pub method: OtMethod,
    pub warning: Option<ConvergenceWarning>,
    /// Sinkhorn iterations, or simplex pivots for exact solves.
    pub iterations: usize,
}

impl TransportPlan {
    /// Largest absolute deviation of the plan's row/column sums from `mu`/`nu`.
    pub fn marginal_violation(&self, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) -> f64 {
        marginal_violation(self.coupling.view(), mu, nu)
    }

    /// `sum mu u + sum nu v`.
    pub fn dual_objective(&self, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) -> f64 {
        mu.dot(&self.dual_u) + nu.dot(&self.dual_v)
    }
}

pub fn marginal_violation(coupling: ArrayView2<'_, f64>, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) -> f64 {
    let rows = coupling.sum_axis(Axis(1));
    let cols = coupling.sum_axis(Axis(0));
    let r = rows.iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let c = cols.iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.max(c)
}

pub(crate) fn transport_cost(coupling: ArrayView2<'_, f64>, cost: ArrayView2<'_, f64>) -> f64 {
    coupling.iter().zip(cost.iter()).map(|(p, c)| p * c).sum()
}

fn check_marginal(name: &str, w: ArrayView1<'_, f64>, len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::Input(format!(
            "{name} has {} entries, cost matrix expects {len}",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(format!("{name} has negative or non-finite entries")));
    }
    let total = w.sum();
    if (total - 1.0).abs() > MARGINAL_MASS_TOL {
        return Err(Error::Input(format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

pub(crate) fn check_problem(mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>, cost: &CostMatrix) -> Result<()> {
    check_marginal("mu", mu, cost.nrows())?;
    check_marginal("nu", nu, cost.ncols())
}

/// Re-centers potentials so that `sum_i mu_i u_i = 0`, keeping `u_i + v_k` fixed.
pub(crate) fn center_duals(mu: ArrayView1<'_, f64>, u: &mut Array1<f64>, v: &mut Array1<f64>) {
    let shift = mu.dot(u);
    u.mapv_inplace(|x| x - shift);
    v.mapv_inplace(|x| x + shift);
}
