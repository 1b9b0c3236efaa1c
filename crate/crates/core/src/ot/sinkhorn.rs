//! Stabilized Sinkhorn for `min <P, C> + eps KL(P | mu nu^T)`.
//!
//! Potentials `(f, g)` parametrize `P_ik = mu_i nu_k exp((f_i + g_k - C_ik) / eps)`.
//! The returned coupling is rounded onto the transport polytope so its
//! marginals are exact up to float error even when the iterations stop early.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{center_duals, check_problem, transport_cost, ConvergenceWarning, CostMatrix, OtMethod, TransportPlan};
use crate::{Error, Result};

/// Floor applied to zero marginal weights before iterating.
const WEIGHT_FLOOR: f64 = 1e-12;
/// Marginal violation is checked every this many iterations.
const CHECK_EVERY: usize = 10;
/// Scalings outside this range are folded into the potentials.
const ABSORB_BELOW: f64 = 1e-30;
const ABSORB_ABOVE: f64 = 1e30;
/// Cold starts divide eps by this factor per annealing stage.
const EPS_DECAY: f64 = 4.0;
/// Marginal violation that ends an intermediate annealing stage.
const STAGE_TOL: f64 = 1e-4;
/// Iteration cap of an intermediate annealing stage.
const STAGE_ITERS: usize = 50;

/// Sinkhorn solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinkhorn {
    pub eps: f64,
    pub max_iter: usize,
    /// Stop once the L1 row-marginal violation drops below this.
    pub tol: f64,
}

impl Sinkhorn {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            max_iter: 10_000,
            tol: 1e-9,
        }
    }

    /// `eps = 1e-2 * mean(C)`.
    pub fn default_for(cost: &CostMatrix) -> Self {
        Self::new(1e-2 * cost.mean())
    }

    pub fn solve(&self, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>, cost: &CostMatrix) -> Result<TransportPlan> {
        solve_sinkhorn(mu, nu, cost, self.eps, self.max_iter, self.tol)
    }

    /// Starts the iterations from target-side potentials `g0`, e.g. the
    /// `dual_v` of a previous solve on a nearby problem.
    pub fn solve_from(
        &self,
        mu: ArrayView1<'_, f64>,
        nu: ArrayView1<'_, f64>,
        cost: &CostMatrix,
        g0: ArrayView1<'_, f64>,
    ) -> Result<TransportPlan> {
        sinkhorn(mu, nu, cost, self.eps, self.max_iter, self.tol, Some(g0))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn solve_sinkhorn(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    sinkhorn(mu, nu, cost, eps, max_iter, tol, None)
}

fn sinkhorn(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    eps: f64,
    max_iter: usize,
    tol: f64,
    g0: Option<ArrayView1<'_, f64>>,
) -> Result<TransportPlan> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    check_problem(mu, nu, cost)?;
    let c = cost.entries();
    let (m, n) = c.dim();
    let mu_floor: Array1<f64> = mu.mapv(|w| w.max(WEIGHT_FLOOR));
    let nu_floor: Array1<f64> = nu.mapv(|w| w.max(WEIGHT_FLOOR));
    let log_mu = mu_floor.mapv(f64::ln);
    let log_nu = nu_floor.mapv(f64::ln);
    let g = match g0 {
        Some(g0) if g0.len() == n && g0.iter().all(|v| v.is_finite()) => g0.to_owned(),
        Some(g0) => {
            return Err(Error::Input(format!(
                "warm start has {} potentials for {n} target atoms",
                g0.len()
            )))
        }
        None => Array1::<f64>::zeros(n),
    };
    // cold starts anneal eps down from the cost scale; warm starts go straight to eps
    let start = if g0.is_some() {
        eps
    } else {
        c.fold(eps, |a, &b| a.max(b))
    };
    let mut st = Stabilized {
        c,
        eps: start,
        log_mu: &log_mu,
        log_nu: &log_nu,
        mu_floor: &mu_floor,
        nu_floor: &nu_floor,
        f: Array1::zeros(m),
        g,
        kernel: Array2::zeros((m, n)),
        u: Array1::ones(m),
        v: Array1::ones(n),
    };
    st.log_step();
    st.absorb();
    let mut iterations = 1;
    let mut stage_eps = start;
    while stage_eps > eps && iterations < max_iter {
        let budget = STAGE_ITERS.min(max_iter - iterations);
        let (used, _) = st.iterate(budget, tol.max(STAGE_TOL), mu);
        iterations += used;
        stage_eps = (stage_eps / EPS_DECAY).max(eps);
        st.set_eps(stage_eps);
    }
    st.set_eps(eps);
    let (used, violation) = st.iterate(max_iter - iterations, tol, mu);
    iterations += used;
    st.absorb();
    if violation >= tol {
        // potentials from a cut-short stage may not fit the final eps
        st.log_step();
    }
    let (mut f, mut g) = (st.f, st.g);

    let mut coupling = Array2::zeros((m, n));
    for i in 0..m {
        for k in 0..n {
            coupling[[i, k]] = (log_mu[i] + log_nu[k] + (f[i] + g[k] - c[[i, k]]) / eps).exp();
        }
    }
    round_to_marginals(&mut coupling, mu, nu);

    let warning = (violation >= tol).then(|| {
        log::warn!("sinkhorn stopped after {iterations} iterations with marginal violation {violation:.3e}");
        ConvergenceWarning { iterations, violation }
    });
    center_duals(mu, &mut f, &mut g);
    Ok(TransportPlan {
        cost: transport_cost(coupling.view(), c),
        coupling,
        dual_u: f,
        dual_v: g,
        method: OtMethod::Sinkhorn { eps },
        warning,
        iterations,
    })
}

fn usable(x: &Array1<f64>) -> bool {
    x.iter().all(|v| v.is_finite() && *v > 0.0)
}

fn moderate(x: &Array1<f64>) -> bool {
    x.iter().all(|v| (ABSORB_BELOW..=ABSORB_ABOVE).contains(v))
}

/// Scaling-domain iterate `P = diag(u) K diag(v)` with
/// `K_ik = mu_i nu_k exp((f_i + g_k - C_ik) / eps)`. The potentials `(f, g)`
/// absorb the scalings whenever they drift out of range, so `K` stays
/// representable while the inner loop is matrix-vector products only.
struct Stabilized<'a> {
    c: ArrayView2<'a, f64>,
    eps: f64,
    log_mu: &'a Array1<f64>,
    log_nu: &'a Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    mu_floor: &'a Array1<f64>,
    nu_floor: &'a Array1<f64>,
    kernel: Array2<f64>,
    u: Array1<f64>,
    v: Array1<f64>,
}

impl Stabilized<'_> {
    /// Exact log-domain update of `f` given `g`, then of `g` given `f`.
    /// Expects `u = v = 1`.
    fn log_step(&mut self) {
        let eps = self.eps;
        let b = self.log_nu + &(&self.g / eps);
        for (fi, row) in self.f.iter_mut().zip(self.c.rows()) {
            *fi = -eps * log_sum_exp(row.iter().zip(b.iter()).map(|(c, bk)| bk - c / eps));
        }
        let a = self.log_mu + &(&self.f / eps);
        for (gk, col) in self.g.iter_mut().zip(self.c.columns()) {
            *gk = -eps * log_sum_exp(col.iter().zip(a.iter()).map(|(c, ai)| ai - c / eps));
        }
    }

    /// At most `budget` scaling iterations; returns the count used and the
    /// final L1 row-marginal violation against `mu`.
    fn iterate(&mut self, budget: usize, tol: f64, mu: ArrayView1<'_, f64>) -> (usize, f64) {
        let mut violation = f64::INFINITY;
        let mut used = 0;
        loop {
            if used % CHECK_EVERY == 0 || used == budget {
                let rows = &self.u * &self.kernel.dot(&self.v);
                violation = rows.iter().zip(mu).map(|(r, w)| (r - w).abs()).sum();
                if violation < tol {
                    break;
                }
            }
            if used >= budget {
                break;
            }
            used += 1;
            let u = self.mu_floor / &self.kernel.dot(&self.v);
            let v = self.nu_floor / &self.kernel.t().dot(&u);
            if !usable(&u) || !usable(&v) {
                // kernel under- or overflowed: fold the last good scalings into
                // the potentials and take an exact log-domain step instead
                self.absorb();
                self.log_step();
                self.absorb();
            } else {
                self.u = u;
                self.v = v;
                if !moderate(&self.u) || !moderate(&self.v) {
                    self.absorb();
                }
            }
        }
        (used, violation)
    }

    fn set_eps(&mut self, eps: f64) {
        if eps != self.eps {
            self.absorb();
            self.eps = eps;
            self.absorb();
        }
    }

    fn absorb(&mut self) {
        let eps = self.eps;
        self.f.zip_mut_with(&self.u, |f, u| *f += eps * u.ln());
        self.g.zip_mut_with(&self.v, |g, v| *g += eps * v.ln());
        self.u.fill(1.0);
        self.v.fill(1.0);
        let (f, g, lm, ln) = (&self.f, &self.g, self.log_mu, self.log_nu);
        let c = self.c;
        self.kernel
            .indexed_iter_mut()
            .for_each(|((i, k), x)| *x = (lm[i] + ln[k] + (f[i] + g[k] - c[[i, k]]) / eps).exp());
    }
}

/// Projects a nearly feasible coupling onto the transport polytope: shrink
/// over-full rows and columns, then spread the missing mass as a rank-one term.
fn round_to_marginals(p: &mut Array2<f64>, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) {
    let rows = p.sum_axis(Axis(1));
    for (mut row, (&r, &target)) in p.axis_iter_mut(Axis(0)).zip(rows.iter().zip(mu)) {
        if r > target {
            row *= if r > 0.0 { target / r } else { 0.0 };
        }
    }
    let cols = p.sum_axis(Axis(0));
    for (mut col, (&s, &target)) in p.axis_iter_mut(Axis(1)).zip(cols.iter().zip(nu)) {
        if s > target {
            col *= if s > 0.0 { target / s } else { 0.0 };
        }
    }
    let err_r = (&mu - &p.sum_axis(Axis(1))).mapv(|v| v.max(0.0));
    let err_c = (&nu - &p.sum_axis(Axis(0))).mapv(|v| v.max(0.0));
    let total = err_r.sum();
    if total > 0.0 {
        for i in 0..p.nrows() {
            for k in 0..p.ncols() {
                p[[i, k]] += err_r[i] * err_c[k] / total;
            }
        }
    }
}
