//! Discrete optimal transport between the text-embedding measure and a batch
//! of visual embeddings under the cosine cost `1 - <a, b>`.
//!
//! [`exact_ot`] solves the transportation linear program with a primal
//! network simplex on the bipartite spanning-tree basis. [`sinkhorn`] solves
//! the entropic problem with log-domain scaling. [`constrained_clustering_oracle`]
//! enumerates cardinality-constrained assignments and serves as an
//! independent check of the exact solver on small instances.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::embedding::{argmax, dot, UnitEmbedding};
use crate::error::{Error, Result};

/// Weighted point set on the sphere.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure {
    support: Vec<UnitEmbedding>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<UnitEmbedding>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptyInput);
        }
        if support.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                found: weights.len(),
            });
        }
        check_simplex(&weights)?;
        Ok(Self { support, weights })
    }

    pub fn uniform(support: Vec<UnitEmbedding>) -> Result<Self> {
        let n = support.len();
        Self::new(support, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn support(&self) -> &[UnitEmbedding] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InfeasibleMarginals("negative or non-finite weight".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InfeasibleMarginals(format!("weights sum to {s}")));
    }
    Ok(())
}

/// Row-major `rows x cols` ground cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    c: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if r == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(bad) = rows.iter().find(|row| row.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: bad.len(),
            });
        }
        let c: Vec<f64> = rows.into_iter().flatten().collect();
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows: r, cols, c })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.cols + j]
    }
}

/// Nonnegative coupling with its transport cost.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    p: Vec<f64>,
    value: f64,
}

impl TransportPlan {
    fn new(rows: usize, cols: usize, p: Vec<f64>, cost: &CostMatrix) -> Self {
        let value = p.iter().zip(&cost.c).map(|(x, c)| x * c).sum();
        Self { rows, cols, p, value }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.cols..(i + 1) * self.cols]
    }

    /// `<plan, cost>`.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn positive_entries(&self) -> usize {
        self.p.iter().filter(|x| **x > 0.0).count()
    }
}

/// Sample-to-class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn cardinalities(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &k in &self.0 {
            counts[k] += 1;
        }
        counts
    }

    /// Mean cosine cost of the assignment.
    pub fn mean_cost(&self, taus: &[UnitEmbedding], zs: &[UnitEmbedding]) -> f64 {
        let total: f64 = self
            .0
            .iter()
            .zip(zs)
            .map(|(&k, z)| cosine_cost(&taus[k], z))
            .sum();
        total / zs.len() as f64
    }
}

fn cosine_cost(a: &UnitEmbedding, b: &UnitEmbedding) -> f64 {
    (1.0 - dot(a.values(), b.values())).clamp(0.0, 2.0)
}

/// `c[k][n] = 1 - <tau_k, z_n>`, clamped to `[0, 2]`.
pub fn cost_matrix(taus: &[UnitEmbedding], zs: &[UnitEmbedding]) -> Result<CostMatrix> {
    if taus.is_empty() || zs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = taus[0].dim();
    if let Some(bad) = taus.iter().chain(zs).find(|v| v.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.dim(),
        });
    }
    let c = taus
        .iter()
        .flat_map(|t| zs.iter().map(move |z| cosine_cost(t, z)))
        .collect();
    Ok(CostMatrix {
        rows: taus.len(),
        cols: zs.len(),
        c,
    })
}

fn check_marginals(c: &CostMatrix, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != c.rows {
        return Err(Error::DimensionMismatch {
            expected: c.rows,
            found: a.len(),
        });
    }
    if b.len() != c.cols {
        return Err(Error::DimensionMismatch {
            expected: c.cols,
            found: b.len(),
        });
    }
    check_simplex(a)?;
    check_simplex(b)
}

const REDUCED_COST_TOL: f64 = 1e-12;

/// Exact optimal transport by the primal network simplex. The returned plan
/// is a basic solution, so it has at most `rows + cols - 1` positive entries.
pub fn exact_ot(c: &CostMatrix, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    check_marginals(c, a, b)?;
    let (m, n) = (c.rows, c.cols);
    let mut tree = SpanningTree::northwest_corner(m, n, a, b);
    // Dantzig pricing, falling back to Bland's rule after a run of
    // degenerate pivots so the method cannot cycle.
    let mut degenerate_run = 0usize;
    let bland_after = 2 * (m + n);
    loop {
        let (u, v) = tree.potentials(c);
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -REDUCED_COST_TOL;
        'scan: for i in 0..m {
            for j in 0..n {
                if tree.is_basic(i, j) {
                    continue;
                }
                let r = c.get(i, j) - u[i] - v[j];
                if r < best {
                    entering = Some((i, j));
                    if degenerate_run >= bland_after {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((ei, ej)) = entering else { break };
        let theta = tree.pivot(ei, ej);
        if theta > 0.0 {
            degenerate_run = 0;
        } else {
            degenerate_run += 1;
        }
    }
    Ok(TransportPlan::new(m, n, tree.flow, c))
}

/// Basis of the transportation problem: a spanning tree over `m` row nodes
/// and `n` column nodes with one edge per basic cell.
struct SpanningTree {
    m: usize,
    n: usize,
    flow: Vec<f64>,
    basic: Vec<bool>,
    cells: Vec<(usize, usize)>,
}

impl SpanningTree {
    fn northwest_corner(m: usize, n: usize, a: &[f64], b: &[f64]) -> Self {
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let mut flow = vec![0.0; m * n];
        let mut basic = vec![false; m * n];
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let f = ra[i].min(rb[j]).max(0.0);
            flow[i * n + j] = f;
            basic[i * n + j] = true;
            cells.push((i, j));
            ra[i] -= f;
            rb[j] -= f;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && ra[i] <= rb[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            m,
            n,
            flow,
            basic,
            cells,
        }
    }

    fn is_basic(&self, i: usize, j: usize) -> bool {
        self.basic[i * self.n + j]
    }

    /// Node adjacency: rows are nodes `0..m`, columns `m..m+n`. Each entry
    /// is `(neighbour, basic cell index)`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (idx, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, idx));
            adj[self.m + j].push((i, idx));
        }
        adj
    }

    /// Dual potentials with `u[0] = 0` and `u_i + v_j = c_ij` on basic cells.
    fn potentials(&self, c: &CostMatrix) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, idx) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.cells[idx];
                    pot[next] = c.get(i, j) - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(self.m);
        (pot, v)
    }

    /// Brings cell `(ei, ej)` into the basis and returns the step length.
    fn pivot(&mut self, ei: usize, ej: usize) -> f64 {
        let adj = self.adjacency();
        // path from column node ej to row node ei through the tree
        let start = self.m + ej;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == ei {
                break;
            }
            for &(next, idx) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, idx));
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = ei;
        while node != start {
            let (prev, idx) = parent[node].expect("basis must be a spanning tree");
            path.push(idx);
            node = prev;
        }
        // path runs ei -> ... -> start; walking from start the signs
        // alternate -, +, -, ... so the edge at the start end is negative
        path.reverse();
        let mut theta = f64::INFINITY;
        let mut leaving = 0;
        for (pos, &idx) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let (i, j) = self.cells[idx];
                let f = self.flow[i * self.n + j];
                if f < theta {
                    theta = f;
                    leaving = pos;
                }
            }
        }
        for (pos, &idx) in path.iter().enumerate() {
            let (i, j) = self.cells[idx];
            let cell = &mut self.flow[i * self.n + j];
            if pos % 2 == 0 {
                *cell -= theta;
            } else {
                *cell += theta;
            }
        }
        let leave_idx = path[leaving];
        let (li, lj) = self.cells[leave_idx];
        self.flow[li * self.n + lj] = 0.0;
        self.basic[li * self.n + lj] = false;
        self.flow[ei * self.n + ej] = theta;
        self.basic[ei * self.n + ej] = true;
        self.cells[leave_idx] = (ei, ej);
        theta
    }
}

/// Entropic regularization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with epsilon scaling: the regularization starts at
/// the largest cost and is halved down to `epsilon`, each stage warm-started
/// from the previous potentials. Column marginals hold exactly after every
/// sweep; iteration stops once the largest row-marginal error at the final
/// `epsilon` is at most `tol`. `max_iter` bounds the total number of sweeps
/// over all stages. The plan's value is its unregularized transport cost.
pub fn sinkhorn(c: &CostMatrix, a: &[f64], b: &[f64], params: SinkhornParams) -> Result<TransportPlan> {
    check_marginals(c, a, b)?;
    let SinkhornParams { epsilon, max_iter, tol } = params;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut state = SinkhornState::new(c, a, b);
    let c_max = c.c.iter().cloned().fold(0.0, f64::max);
    let mut stages = Vec::new();
    let mut eps = epsilon;
    while eps < c_max {
        stages.push(eps);
        eps *= 2.0;
    }
    stages.reverse();
    stages.pop();
    stages.push(epsilon);

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    for (s, &eps) in stages.iter().enumerate() {
        let last = s + 1 == stages.len();
        // intermediate stages only need to land near their own fixed point
        let stage_tol = if last { tol } else { tol.max(1e-3) };
        violation = f64::INFINITY;
        while iterations < max_iter {
            iterations += 1;
            violation = state.sweep(eps);
            if violation <= stage_tol {
                break;
            }
        }
    }
    let plan = state.plan(epsilon);
    if violation <= tol {
        Ok(plan)
    } else {
        Err(Error::NotConverged {
            violation,
            iterations,
            plan: Box::new(plan),
        })
    }
}

struct SinkhornState<'a> {
    c: &'a CostMatrix,
    a: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> SinkhornState<'a> {
    fn new(c: &'a CostMatrix, a: &'a [f64], b: &[f64]) -> Self {
        Self {
            c,
            a,
            log_a: a.iter().map(|x| x.ln()).collect(),
            log_b: b.iter().map(|x| x.ln()).collect(),
            f: vec![0.0; c.rows],
            g: vec![0.0; c.cols],
        }
    }

    /// One row update and one column update; returns the row-marginal error.
    fn sweep(&mut self, eps: f64) -> f64 {
        let (m, n) = (self.c.rows, self.c.cols);
        let c = &self.c.c;
        for i in 0..m {
            let row = &c[i * n..(i + 1) * n];
            self.f[i] = eps * self.log_a[i]
                - eps * log_sum_exp(self.g.iter().zip(row).map(|(gj, cij)| (gj - cij) / eps));
        }
        let f = &self.f;
        for j in 0..n {
            self.g[j] = eps * self.log_b[j] - eps * log_sum_exp((0..m).map(|i| (f[i] - c[i * n + j]) / eps));
        }
        (0..m)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| ((self.f[i] + self.g[j] - c[i * n + j]) / eps).exp())
                    .sum();
                (s - self.a[i]).abs()
            })
            .fold(0.0, f64::max)
    }

    fn plan(&self, eps: f64) -> TransportPlan {
        let (m, n) = (self.c.rows, self.c.cols);
        let p = (0..m)
            .flat_map(|i| (0..n).map(move |j| ((self.f[i] + self.g[j] - self.c.c[i * n + j]) / eps).exp()))
            .collect();
        TransportPlan::new(m, n, p, self.c)
    }
}

/// Solver selection for the clustering loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WassersteinOptions {
    /// Use the exact solver when `K * B` is at most this.
    pub exact_bound: usize,
    pub sinkhorn: SinkhornParams,
}

impl Default for WassersteinOptions {
    fn default() -> Self {
        Self {
            exact_bound: 4096,
            sinkhorn: SinkhornParams::default(),
        }
    }
}

/// Transport cost between `sum_k pi_k delta(tau_k)` and the uniform measure
/// on `batch`, together with the plan used for the gradient.
pub fn wasserstein_loss(
    taus: &[UnitEmbedding],
    batch: &[UnitEmbedding],
    pi: &[f64],
    opts: WassersteinOptions,
) -> Result<(f64, TransportPlan)> {
    let c = cost_matrix(taus, batch)?;
    let b = vec![1.0 / batch.len() as f64; batch.len()];
    let plan = if taus.len() * batch.len() <= opts.exact_bound {
        exact_ot(&c, pi, &b)?
    } else {
        sinkhorn(&c, pi, &b, opts.sinkhorn)?
    };
    Ok((plan.value(), plan))
}

/// Exact transport cost between two discrete measures.
pub fn wasserstein_between(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    let c = cost_matrix(p.support(), q.support())?;
    Ok(exact_ot(&c, p.weights(), q.weights())?.value())
}

/// Gradient of `sum_kn plan[k][n] (1 - tau_k . z_n)` with respect to each
/// `tau_k`, holding the plan fixed: `-sum_n plan[k][n] z_n`.
pub fn wasserstein_grad_taus(plan: &TransportPlan, batch: &[UnitEmbedding]) -> Vec<Vec<f64>> {
    let d = batch.first().map(UnitEmbedding::dim).unwrap_or(0);
    (0..plan.rows())
        .map(|k| {
            let mut g = vec![0.0; d];
            for (p, z) in plan.row(k).iter().zip(batch) {
                if *p != 0.0 {
                    for (gi, zi) in g.iter_mut().zip(z.values()) {
                        *gi -= p * zi;
                    }
                }
            }
            g
        })
        .collect()
}

/// Largest number of assignments [`constrained_clustering_oracle`] enumerates.
pub const ORACLE_MAX_ASSIGNMENTS: f64 = 1e7;

/// Minimum mean cosine cost over all assignments whose class sizes are
/// `B * pi_k`, by exhaustive search.
pub fn constrained_clustering_oracle(
    taus: &[UnitEmbedding],
    zs: &[UnitEmbedding],
    pi: &[f64],
) -> Result<(f64, Assignment)> {
    if taus.len() != pi.len() {
        return Err(Error::DimensionMismatch {
            expected: taus.len(),
            found: pi.len(),
        });
    }
    check_simplex(pi)?;
    let b = zs.len();
    let mut quota = Vec::with_capacity(pi.len());
    for p in pi {
        let q = p * b as f64;
        if (q - q.round()).abs() > 1e-9 {
            return Err(Error::NonIntegralCardinalities);
        }
        quota.push(q.round() as usize);
    }
    // multinomial coefficient B! / prod q_k!
    let mut count = 1.0f64;
    let mut placed = 0usize;
    for &q in &quota {
        for t in 1..=q {
            placed += 1;
            count *= placed as f64 / t as f64;
        }
    }
    if count > ORACLE_MAX_ASSIGNMENTS {
        return Err(Error::TooLarge { count });
    }
    let cost = cost_matrix(taus, zs)?;
    let mut search = Enumeration {
        cost: &cost,
        quota,
        current: vec![0; b],
        best_total: f64::INFINITY,
        best: vec![0; b],
    };
    search.visit(0, 0.0);
    Ok((search.best_total / b as f64, Assignment(search.best)))
}

struct Enumeration<'a> {
    cost: &'a CostMatrix,
    quota: Vec<usize>,
    current: Vec<usize>,
    best_total: f64,
    best: Vec<usize>,
}

impl Enumeration<'_> {
    fn visit(&mut self, n: usize, partial: f64) {
        if n == self.current.len() {
            if partial < self.best_total {
                self.best_total = partial;
                self.best.copy_from_slice(&self.current);
            }
            return;
        }
        for k in 0..self.quota.len() {
            if self.quota[k] == 0 {
                continue;
            }
            self.quota[k] -= 1;
            self.current[n] = k;
            self.visit(n + 1, partial + self.cost.get(k, n));
            self.quota[k] += 1;
        }
    }
}

/// Each sample goes to its closest text embedding; ties to the smallest index.
pub fn nearest_assignment(taus: &[UnitEmbedding], zs: &[UnitEmbedding]) -> Assignment {
    Assignment(
        zs.iter()
            .map(|z| {
                let sims: Vec<f64> = taus.iter().map(|t| dot(t.values(), z.values())).collect();
                argmax(&sims)
            })
            .collect(),
    )
}
