//! Transportation simplex: north-west-corner start, block pricing on the most
//! negative reduced cost, Bland's rule while degenerate pivots stall.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{center_duals, check_problem, transport_cost, CostMatrix, OtMethod, TransportPlan};
use crate::{Error, Result};

/// Optimal plan of the transportation linear program, with duals read off the final basis.
pub fn solve_exact(mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>, cost: &CostMatrix) -> Result<TransportPlan> {
    check_problem(mu, nu, cost)?;
    let c = cost.entries();
    let (m, n) = c.dim();
    // zero-mass atoms are dropped and get their dual from the c-transform afterwards
    let rows: Vec<usize> = (0..m).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&k| nu[k] > 0.0).collect();
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&k| nu[k]).collect();
    let sub = c.select(Axis(0), &rows).select(Axis(1), &cols);

    let mut net = Network::north_west_corner(&a, &b, sub.view());
    let pivots = net.optimize()?;

    let mut coupling = Array2::zeros((m, n));
    for (slot, &(r, k)) in net.cells.iter().enumerate() {
        coupling[[rows[r], cols[k]]] = net.flow[slot].max(0.0);
    }
    let mut u = Array1::from_elem(m, f64::NAN);
    let mut v = Array1::from_elem(n, f64::NAN);
    for (r, &i) in rows.iter().enumerate() {
        u[i] = net.u[r];
    }
    for (k, &j) in cols.iter().enumerate() {
        v[j] = net.v[k];
    }
    for j in (0..n).filter(|&j| nu[j] <= 0.0) {
        v[j] = rows.iter().map(|&i| c[[i, j]] - u[i]).fold(f64::INFINITY, f64::min);
    }
    for i in (0..m).filter(|&i| mu[i] <= 0.0) {
        u[i] = (0..n).map(|j| c[[i, j]] - v[j]).fold(f64::INFINITY, f64::min);
    }
    center_duals(mu, &mut u, &mut v);

    Ok(TransportPlan {
        cost: transport_cost(coupling.view(), c),
        coupling,
        dual_u: u,
        dual_v: v,
        method: OtMethod::Exact,
        warning: None,
        iterations: pivots,
    })
}

const NO_PARENT: usize = usize::MAX;

/// Basis tree over `m` row nodes (`0..m`) and `n` column nodes (`m..m+n`).
struct Network<'a> {
    m: usize,
    n: usize,
    cost: ArrayView2<'a, f64>,
    /// Basic cells, exactly `m + n - 1` slots.
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    parent: Vec<usize>,
    depth: Vec<usize>,
    cursor: usize,
    tol: f64,
}

impl<'a> Network<'a> {
    fn north_west_corner(a: &[f64], b: &[f64], cost: ArrayView2<'a, f64>) -> Self {
        let (m, n) = (a.len(), b.len());
        let mut net = Network {
            m,
            n,
            cost,
            cells: Vec::with_capacity(m + n - 1),
            flow: Vec::with_capacity(m + n - 1),
            adj: vec![Vec::new(); m + n],
            u: vec![0.0; m],
            v: vec![0.0; n],
            parent: vec![NO_PARENT; m + n],
            depth: vec![0; m + n],
            cursor: 0,
            tol: 1e-12 * cost.fold(1.0, |acc: f64, &x| acc.max(x)),
        };
        let (mut i, mut k) = (0, 0);
        let (mut ra, mut rb) = (a[0], b[0]);
        loop {
            let x = ra.min(rb).max(0.0);
            net.push_cell(i, k, x);
            if i == m - 1 && k == n - 1 {
                break;
            }
            // advance exactly one index per cell so the basis stays a spanning tree
            if k == n - 1 || (ra <= rb && i < m - 1) {
                rb -= x;
                i += 1;
                ra = a[i];
            } else {
                ra -= x;
                k += 1;
                rb = b[k];
            }
        }
        net
    }

    fn push_cell(&mut self, r: usize, k: usize, x: f64) {
        let slot = self.cells.len();
        self.cells.push((r, k));
        self.flow.push(x);
        self.adj[r].push(slot);
        self.adj[self.m + k].push(slot);
    }

    fn other_end(&self, slot: usize, node: usize) -> usize {
        let (r, k) = self.cells[slot];
        if node == r {
            self.m + k
        } else {
            r
        }
    }

    /// Solves `u_r + v_k = C_rk` on the basis tree rooted at row 0.
    fn compute_potentials(&mut self) {
        let total = self.m + self.n;
        let mut seen = vec![false; total];
        let mut stack = vec![0usize];
        seen[0] = true;
        self.u[0] = 0.0;
        self.parent[0] = NO_PARENT;
        self.depth[0] = 0;
        while let Some(node) = stack.pop() {
            for idx in 0..self.adj[node].len() {
                let slot = self.adj[node][idx];
                let next = self.other_end(slot, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let (r, k) = self.cells[slot];
                if next >= self.m {
                    self.v[k] = self.cost[[r, k]] - self.u[r];
                } else {
                    self.u[r] = self.cost[[r, k]] - self.v[k];
                }
                self.parent[next] = slot;
                self.depth[next] = self.depth[node] + 1;
                stack.push(next);
            }
        }
        debug_assert!(seen.iter().all(|s| *s), "basis is not a spanning tree");
    }

    fn reduced_cost(&self, r: usize, k: usize) -> f64 {
        self.cost[[r, k]] - self.u[r] - self.v[k]
    }

    /// Most negative reduced cost within the first block that has one.
    fn price_block(&mut self) -> Option<(usize, usize)> {
        let total = self.m * self.n;
        let block = ((total as f64).sqrt() as usize).max(self.n).min(total);
        let mut scanned = 0;
        while scanned < total {
            let mut best = -self.tol;
            let mut pick = None;
            for _ in 0..block.min(total - scanned) {
                let idx = self.cursor;
                self.cursor = (self.cursor + 1) % total;
                scanned += 1;
                let (r, k) = (idx / self.n, idx % self.n);
                let d = self.reduced_cost(r, k);
                if d < best {
                    best = d;
                    pick = Some((r, k));
                }
            }
            if pick.is_some() {
                return pick;
            }
        }
        None
    }

    /// Bland: lowest-index cell with negative reduced cost.
    fn price_bland(&self) -> Option<(usize, usize)> {
        (0..self.m * self.n)
            .map(|idx| (idx / self.n, idx % self.n))
            .find(|&(r, k)| self.reduced_cost(r, k) < -self.tol)
    }

    /// Brings `(r, k)` into the basis. Returns the step length.
    fn pivot(&mut self, r: usize, k: usize) -> f64 {
        let (mut x, mut y) = (r, self.m + k);
        // (slot, sign): -1 loses flow, +1 gains flow
        let mut row_side = Vec::new();
        let mut col_side = Vec::new();
        while x != y {
            if self.depth[x] >= self.depth[y] {
                let slot = self.parent[x];
                // traversed towards the row end of the entering cell: col -> row edges lose flow
                row_side.push((slot, if x < self.m { -1.0 } else { 1.0 }));
                x = self.other_end(slot, x);
            } else {
                let slot = self.parent[y];
                col_side.push((slot, if y >= self.m { -1.0 } else { 1.0 }));
                y = self.other_end(slot, y);
            }
        }
        let mut leave = NO_PARENT;
        let mut theta = f64::INFINITY;
        let mut leave_idx = usize::MAX;
        for &(slot, sign) in col_side.iter().chain(row_side.iter()) {
            if sign < 0.0 {
                let f = self.flow[slot];
                let (cr, ck) = self.cells[slot];
                let idx = cr * self.n + ck;
                if f < theta || (f == theta && idx < leave_idx) {
                    theta = f;
                    leave = slot;
                    leave_idx = idx;
                }
            }
        }
        let theta = theta.max(0.0);
        for &(slot, sign) in col_side.iter().chain(row_side.iter()) {
            self.flow[slot] += sign * theta;
        }
        let (lr, lk) = self.cells[leave];
        self.adj[lr].retain(|&s| s != leave);
        self.adj[self.m + lk].retain(|&s| s != leave);
        self.cells[leave] = (r, k);
        self.flow[leave] = theta;
        self.adj[r].push(leave);
        self.adj[self.m + k].push(leave);
        theta
    }

    /// Pivots until no cell has negative reduced cost; returns the pivot count.
    fn optimize(&mut self) -> Result<usize> {
        let max_pivots = 1_000_000 + 100 * self.m * self.n;
        let stall_limit = self.m + self.n;
        let mut degenerate_run = 0;
        for pivots in 0..max_pivots {
            self.compute_potentials();
            let entering = if degenerate_run > stall_limit {
                self.price_bland()
            } else {
                self.price_block()
            };
            let Some((r, k)) = entering else {
                return Ok(pivots);
            };
            let theta = self.pivot(r, k);
            if theta > 0.0 {
                degenerate_run = 0;
            } else {
                degenerate_run += 1;
            }
        }
        Err(Error::Input(format!(
            "transportation simplex did not terminate within {max_pivots} pivots"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::squared_euclidean_cost;
    use itertools::Itertools;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> Array1<f64> {
        Array1::from_elem(n, 1.0 / n as f64)
    }

    #[test]
    fn identical_measures_cost_nothing() {
        let c = CostMatrix::new(array![[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]]).unwrap();
        let w = uniform(3);
        let plan = solve_exact(w.view(), w.view(), &c).unwrap();
        assert_eq!(plan.cost, 0.0);
        for i in 0..3 {
            for k in 0..3 {
                if i != k {
                    assert_eq!(plan.coupling[[i, k]], 0.0);
                }
            }
        }
    }

    #[test]
    fn unit_distance_pair() {
        let c = squared_euclidean_cost(array![[0.0]].view(), array![[1.0]].view()).unwrap();
        let one = array![1.0];
        let plan = solve_exact(one.view(), one.view(), &c).unwrap();
        assert_eq!(plan.cost, 1.0);
        assert_eq!(plan.coupling, array![[1.0]]);
    }

    #[test]
    fn matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let c = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..10.0));
            let brute = (0..4)
                .permutations(4)
                .map(|p| p.iter().enumerate().map(|(i, &k)| c[[i, k]]).sum::<f64>() / 4.0)
                .fold(f64::INFINITY, f64::min);
            let w = uniform(4);
            let plan = solve_exact(w.view(), w.view(), &CostMatrix::new(c).unwrap()).unwrap();
            assert!((plan.cost - brute).abs() <= 1e-12 * brute.max(1.0));
        }
    }

    #[test]
    fn zero_mass_rows_get_c_transform_duals() {
        let c = CostMatrix::new(array![[1.0, 4.0], [0.5, 0.2], [3.0, 0.0]]).unwrap();
        let mu = array![0.5, 0.0, 0.5];
        let nu = array![0.5, 0.5];
        let plan = solve_exact(mu.view(), nu.view(), &c).unwrap();
        assert_eq!(plan.coupling.row(1).sum(), 0.0);
        assert!((plan.cost - 0.5).abs() < 1e-15);
        let e = c.entries();
        let expected = (0..2).map(|k| e[[1, k]] - plan.dual_v[k]).fold(f64::INFINITY, f64::min);
        assert!((plan.dual_u[1] - expected).abs() < 1e-12);
        for i in 0..3 {
            for k in 0..2 {
                assert!(plan.dual_u[i] + plan.dual_v[k] <= e[[i, k]] + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_unbalanced_or_nonfinite_inputs() {
        let c = CostMatrix::new(array![[1.0, 2.0]]).unwrap();
        assert!(solve_exact(array![1.0].view(), array![0.3, 0.3].view(), &c).is_err());
        assert!(solve_exact(array![1.0].view(), array![0.5].view(), &c).is_err());
        assert!(CostMatrix::new(array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn rectangular_degenerate_instance() {
        // many equal partial sums: exercise the degenerate-pivot path
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = Array2::from_shape_fn((12, 6), |_| rng.random_range(0..4) as f64);
        let (mu, nu) = (uniform(12), uniform(6));
        let plan = solve_exact(mu.view(), nu.view(), &CostMatrix::new(c.clone()).unwrap()).unwrap();
        assert!(plan.marginal_violation(mu.view(), nu.view()) < 1e-12);
        assert!((plan.dual_objective(mu.view(), nu.view()) - plan.cost).abs() < 1e-12);
    }
}
