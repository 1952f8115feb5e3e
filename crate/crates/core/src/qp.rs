//! Dense convex quadratic programming.
//!
//! Solves problems of the form
//!
//! ```text
//!     minimize     1/2 z' H z + g' z
//!     subject to   A_eq z  = b_eq
//!                  A_in z <= b_in
//!                  lower <= z <= upper
//! ```
//!
//! with a primal active-set method. Box bounds are handled by fixing
//! variables rather than as general rows, which keeps the equality-constrained
//! subproblems small for the projection problems this crate produces. A
//! positive semidefinite `H` is made positive definite by adding a tiny ridge
//! on its numerical null space; the final working set is then re-solved with
//! the unregularized Hessian whenever that system is nonsingular.
//!
//! When no feasible starting point is supplied an elastic phase-one problem
//! is solved first. Infeasibility is reported when its optimal elastic slack
//! stays positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Ridge added to null directions of a singular Hessian.
pub const RIDGE: f64 = 1e-10;
/// Default optimality tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("problem is infeasible (minimal violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("problem is unbounded below")]
    Unbounded,
    #[error("iteration limit reached (kkt residual {:.3e})", .0.kkt_residual)]
    MaxIter(Box<QpSolution>),
    #[error("singular KKT system in working set")]
    Singular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Rows of `a_in z <= b_in`.
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub in_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Constraints held active at the end; feed back through [`QpOptions::with_working_set`].
    pub working_set: WorkingSet,
}

/// Inequality rows and bounds treated as equalities.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkingSet {
    pub rows: Vec<usize>,
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

impl QpSolution {
    pub fn duals(&self) -> QpDuals<'_> {
        QpDuals {
            eq: &self.eq_duals,
            ineq: &self.in_duals,
            lower: &self.lower_duals,
            upper: &self.upper_duals,
        }
    }
}

/// Borrowed multipliers, sign convention `H z + g + A_eq' eq + A_in' ineq - lower + upper = 0`.
#[derive(Clone, Copy, Debug)]
pub struct QpDuals<'a> {
    pub eq: &'a DVector<f64>,
    pub ineq: &'a DVector<f64>,
    pub lower: &'a DVector<f64>,
    pub upper: &'a DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpOptions {
    pub tol: f64,
    /// Defaults to `10 * (n + constraints)`.
    pub max_iter: Option<usize>,
    /// Starting point. Used directly when feasible, otherwise phase one starts from it.
    pub warm_start: Option<DVector<f64>>,
    /// Initial working set; only entries active at the starting point are kept.
    pub working_set: Option<WorkingSet>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: None, warm_start: None, working_set: None }
    }
}

impl QpOptions {
    pub fn with_warm_start(mut self, z: DVector<f64>) -> Self {
        self.warm_start = Some(z);
        self
    }

    pub fn with_working_set(mut self, ws: WorkingSet) -> Self {
        self.working_set = Some(ws);
        self
    }
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    /// Largest violation of any constraint at `z` (0 when feasible).
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            let r = &self.a_eq * z - &self.b_eq;
            v = v.max(r.amax());
        }
        if self.a_in.nrows() > 0 {
            let r = &self.a_in * z - &self.b_in;
            v = r.iter().fold(v, |acc, &x| acc.max(x));
        }
        for k in 0..z.len() {
            v = v.max(self.lower[k] - z[k]).max(z[k] - self.upper[k]);
        }
        v
    }

    fn check_dims(&self) -> Result<(), QpError> {
        let n = self.dim();
        let bad = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
        if self.h.nrows() != n || self.h.ncols() != n {
            return bad("hessian must be n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality system");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality system");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds");
        }
        if (0..n).any(|k| self.lower[k] > self.upper[k]) {
            return Err(QpError::Infeasible { violation: f64::INFINITY });
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        let mut s: f64 = 1.0;
        s = s.max(self.h.amax()).max(self.g.amax());
        if !self.b_eq.is_empty() {
            s = s.max(self.b_eq.amax());
        }
        if !self.b_in.is_empty() {
            s = s.max(self.b_in.amax());
        }
        s
    }
}

/// Maximum of stationarity, primal feasibility, dual sign and complementarity violations.
pub fn kkt_residual(p: &QpProblem, z: &DVector<f64>, duals: &QpDuals<'_>) -> f64 {
    let mut stat = &p.h * z + &p.g;
    if p.a_eq.nrows() > 0 {
        stat += p.a_eq.transpose() * duals.eq;
    }
    if p.a_in.nrows() > 0 {
        stat += p.a_in.transpose() * duals.ineq;
    }
    stat -= duals.lower;
    stat += duals.upper;
    let mut r = stat.amax();
    r = r.max(p.max_violation(z));
    for i in 0..p.a_in.nrows() {
        let mu = duals.ineq[i];
        let slack = p.b_in[i] - p.a_in.row(i).dot(&z.transpose());
        r = r.max(-mu).max((mu * slack).abs());
    }
    for k in 0..z.len() {
        let lo = duals.lower[k];
        let up = duals.upper[k];
        r = r.max(-lo).max(-up);
        if p.lower[k].is_finite() {
            r = r.max((lo * (z[k] - p.lower[k])).abs());
        } else {
            r = r.max(lo.abs());
        }
        if p.upper[k].is_finite() {
            r = r.max((up * (p.upper[k] - z[k])).abs());
        } else {
            r = r.max(up.abs());
        }
    }
    r
}

/// Solve a convex QP. Deterministic: identical inputs give bit-identical output.
pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    p.check_dims()?;
    let n = p.dim();
    let max_iter = opts.max_iter.unwrap_or(10 * (n + p.a_eq.nrows() + p.a_in.nrows() + n).max(10));
    let scale = p.scale();
    let feas_tol = opts.tol * scale;

    let mut z0 = opts.warm_start.clone().unwrap_or_else(|| DVector::zeros(n));
    if z0.len() != n {
        return Err(QpError::DimensionMismatch("warm start".into()));
    }
    for k in 0..n {
        z0[k] = z0[k].clamp(p.lower[k], p.upper[k]);
    }

    let h_reg = regularize(&p.h);
    let mut iterations = 0;
    let mut guess = opts.working_set.as_ref();
    let start = if p.max_violation(&z0) <= feas_tol {
        z0
    } else {
        guess = None;
        let (z1, t, it) = phase_one(p, &z0, opts.tol)?;
        iterations += it;
        if t > feas_tol {
            return Err(QpError::Infeasible { violation: t });
        }
        z1
    };

    let eq_rows = independent_rows(&p.a_eq);
    let mut solver = ActiveSet::new(p, &h_reg, &eq_rows, start, opts.tol, guess);
    let outcome = solver.run(max_iter.saturating_sub(iterations).max(1))?;
    iterations += solver.iterations;
    solver.polish();

    let mut sol = solver.into_solution(iterations);
    sol.kkt_residual = kkt_residual(p, &sol.z, &sol.duals());
    if !outcome || sol.kkt_residual > opts.tol * scale {
        sol.status = QpStatus::MaxIter;
        return Err(QpError::MaxIter(Box::new(sol)));
    }
    Ok(sol)
}

/// Hessian with `RIDGE` added along eigen-directions whose curvature is below it.
fn regularize(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    let mut sym = (h + h.transpose()) * 0.5;
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || sym[(i, j)] == 0.0));
    if diagonal {
        for i in 0..n {
            if sym[(i, i)] < RIDGE {
                sym[(i, i)] += RIDGE;
            }
        }
        return sym;
    }
    let eig = SymmetricEigen::new(sym.clone());
    let mut out = sym;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < RIDGE {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) * RIDGE;
        }
    }
    out
}

/// Solves `[D Aᵀ; A 0] [z; ν] = [r1; r2]` through `A D⁻¹ Aᵀ` when the leading `f × f` block is a
/// positive diagonal. `None` when it is not, or when the Schur complement is not positive definite.
fn diagonal_schur(k: &DMatrix<f64>, rhs: &DVector<f64>, f: usize) -> Option<DVector<f64>> {
    let m = k.nrows() - f;
    for a in 0..f {
        if k[(a, a)] <= 0.0 || (0..f).any(|b| b != a && k[(a, b)] != 0.0) {
            return None;
        }
    }
    let dinv = DVector::from_fn(f, |a, _| 1.0 / k[(a, a)]);
    let r1 = rhs.rows(0, f);
    let mut sol = DVector::zeros(f + m);
    if m > 0 {
        let a = k.view((f, 0), (m, f));
        let mut ad = a.clone_owned();
        for c in 0..f {
            ad.column_mut(c).scale_mut(dinv[c]);
        }
        let schur = &ad * a.transpose();
        let nu_rhs = &ad * r1 - rhs.rows(f, m);
        let nu = schur.cholesky()?.solve(&nu_rhs);
        sol.rows_mut(f, m).copy_from(&nu);
    }
    let at_nu = k.view((0, f), (f, m)) * sol.rows(f, m);
    for a in 0..f {
        sol[a] = dinv[a] * (r1[a] - at_nu[a]);
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Indices of a maximal linearly independent subset of rows (greedy, in order).
fn independent_rows(a: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for i in 0..a.nrows() {
        let row: DVector<f64> = a.row(i).transpose();
        if orthogonal_residual(&basis, &row).is_some_and(|q| {
            basis.push(q);
            true
        }) {
            keep.push(i);
        }
    }
    keep
}

/// Component of `v` orthogonal to an orthonormal basis, normalized; `None` when dependent.
fn orthogonal_residual(basis: &[DVector<f64>], v: &DVector<f64>) -> Option<DVector<f64>> {
    let norm = v.norm();
    if norm == 0.0 {
        return None;
    }
    let mut r = v.clone();
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
    }
    let rn = r.norm();
    if rn <= 1e-10 * norm {
        None
    } else {
        Some(r / rn)
    }
}

/// Elastic feasibility problem; returns (z, minimal uniform violation, iterations).
fn phase_one(p: &QpProblem, z0: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, f64, usize), QpError> {
    let n = p.dim();
    let me = p.a_eq.nrows();
    let mi = p.a_in.nrows();
    let rho = 1e-6;
    let mut h = DMatrix::zeros(n + 1, n + 1);
    let mut g = DVector::zeros(n + 1);
    for k in 0..n {
        h[(k, k)] = rho;
        g[k] = -rho * z0[k];
    }
    g[n] = 1.0;
    let rows = 2 * me + mi;
    let mut a = DMatrix::zeros(rows, n + 1);
    let mut b = DVector::zeros(rows);
    for i in 0..me {
        for k in 0..n {
            a[(2 * i, k)] = p.a_eq[(i, k)];
            a[(2 * i + 1, k)] = -p.a_eq[(i, k)];
        }
        a[(2 * i, n)] = -1.0;
        a[(2 * i + 1, n)] = -1.0;
        b[2 * i] = p.b_eq[i];
        b[2 * i + 1] = -p.b_eq[i];
    }
    for i in 0..mi {
        for k in 0..n {
            a[(2 * me + i, k)] = p.a_in[(i, k)];
        }
        a[(2 * me + i, n)] = -1.0;
        b[2 * me + i] = p.b_in[i];
    }
    let mut lower = DVector::from_element(n + 1, 0.0);
    let mut upper = DVector::from_element(n + 1, f64::INFINITY);
    for k in 0..n {
        lower[k] = p.lower[k];
        upper[k] = p.upper[k];
    }
    let aux = QpProblem::new(h, g).with_inequalities(a, b).with_bounds(lower, upper);
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(z0);
    start[n] = p.max_violation(z0).max(0.0);

    let h_reg = regularize(&aux.h);
    let mut solver = ActiveSet::new(&aux, &h_reg, &[], start, tol, None);
    let max_iter = 10 * (n + 1 + rows + n + 1).max(10);
    solver.run(max_iter)?;
    let z = solver.z.rows(0, n).into_owned();
    let violation = p.max_violation(&z);
    Ok((z, violation, solver.iterations))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
    Fixed,
}

struct ActiveSet<'a> {
    p: &'a QpProblem,
    h: &'a DMatrix<f64>,
    eq_rows: Vec<usize>,
    active: Vec<usize>,
    bounds: Vec<Bound>,
    z: DVector<f64>,
    eq_mult: Vec<f64>,
    in_mult: Vec<f64>,
    tol: f64,
    iterations: usize,
    /// Consecutive iterations without progress; past `BLAND_AFTER` the drop rule turns to
    /// smallest-index to break cycling at degenerate vertices.
    stalls: usize,
}

const BLAND_AFTER: usize = 8;

impl<'a> ActiveSet<'a> {
    fn new(
        p: &'a QpProblem,
        h: &'a DMatrix<f64>,
        eq_rows: &[usize],
        mut z: DVector<f64>,
        tol: f64,
        guess: Option<&WorkingSet>,
    ) -> Self {
        let n = p.dim();
        let mut bounds = vec![Bound::Free; n];
        let near = |v: f64, b: f64| (v - b).abs() <= 1e-12 * (1.0 + b.abs());
        for k in 0..n {
            let (lo, up) = (p.lower[k], p.upper[k]);
            if lo == up {
                bounds[k] = Bound::Fixed;
                z[k] = lo;
            } else if guess.is_some() {
                continue;
            } else if lo.is_finite() && (z[k] - lo).abs() <= 1e-12 * (1.0 + lo.abs()) {
                bounds[k] = Bound::Lower;
                z[k] = lo;
            } else if up.is_finite() && (up - z[k]).abs() <= 1e-12 * (1.0 + up.abs()) {
                bounds[k] = Bound::Upper;
                z[k] = up;
            }
        }
        let mut s = Self {
            p,
            h,
            eq_rows: eq_rows.to_vec(),
            active: Vec::new(),
            bounds,
            z,
            eq_mult: Vec::new(),
            in_mult: Vec::new(),
            tol,
            iterations: 0,
            stalls: 0,
        };
        match guess {
            Some(ws) => {
                for &k in &ws.lower {
                    if k < n && s.bounds[k] == Bound::Free && near(s.z[k], p.lower[k]) {
                        s.bounds[k] = Bound::Lower;
                        s.z[k] = p.lower[k];
                    }
                }
                for &k in &ws.upper {
                    if k < n && s.bounds[k] == Bound::Free && near(s.z[k], p.upper[k]) {
                        s.bounds[k] = Bound::Upper;
                        s.z[k] = p.upper[k];
                    }
                }
                for &i in &ws.rows {
                    if i < p.a_in.nrows() && (p.a_in.row(i).dot(&s.z.transpose()) - p.b_in[i]).abs() <= 1e-10 * (1.0 + p.b_in[i].abs()) && !s.active.contains(&i) {
                        s.active.push(i);
                    }
                }
                s.prune_dependent_rows();
            }
            None => s.seed_working_set(),
        }
        s
    }

    /// Equality rows plus near-active inequality rows, kept linearly independent
    /// over the free variables. Releases bounds when they collide with equalities.
    fn seed_working_set(&mut self) {
        let free_basis = |s: &Self, rows: &mut Vec<DVector<f64>>, r: DVector<f64>| -> bool {
            let restricted = s.restrict(&r);
            match orthogonal_residual(rows, &restricted) {
                Some(q) => {
                    rows.push(q);
                    true
                }
                None => false,
            }
        };
        let mut basis = Vec::new();
        let mut ok = true;
        for &i in &self.eq_rows {
            let r = self.p.a_eq.row(i).transpose();
            if !free_basis(self, &mut basis, r) {
                ok = false;
                break;
            }
        }
        if !ok {
            for b in self.bounds.iter_mut() {
                if matches!(b, Bound::Lower | Bound::Upper) {
                    *b = Bound::Free;
                }
            }
            basis.clear();
            for &i in &self.eq_rows {
                let r = self.p.a_eq.row(i).transpose();
                free_basis(self, &mut basis, r);
            }
        }
        for i in 0..self.p.a_in.nrows() {
            let row = self.p.a_in.row(i);
            let slack = self.p.b_in[i] - row.dot(&self.z.transpose());
            if slack.abs() <= 1e-12 * (1.0 + self.p.b_in[i].abs()) && free_basis(self, &mut basis, row.transpose()) {
                self.active.push(i);
            }
        }
    }

    /// Drops active rows that became dependent on the rest of the working set once
    /// bounds were fixed; at a degenerate vertex they stay satisfied through the others.
    fn prune_dependent_rows(&mut self) -> Vec<DVector<f64>> {
        let mut basis = Vec::new();
        for &i in &self.eq_rows {
            if let Some(q) = orthogonal_residual(&basis, &self.restrict(&self.p.a_eq.row(i).transpose())) {
                basis.push(q);
            }
        }
        let mut keep = Vec::with_capacity(self.active.len());
        for &i in &self.active {
            if let Some(q) = orthogonal_residual(&basis, &self.restrict(&self.p.a_in.row(i).transpose())) {
                basis.push(q);
                keep.push(i);
            }
        }
        self.active = keep;
        basis
    }

    fn restrict(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = r.clone();
        for (k, b) in self.bounds.iter().enumerate() {
            if *b != Bound::Free {
                out[k] = 0.0;
            }
        }
        out
    }

    fn free(&self) -> Vec<usize> {
        (0..self.bounds.len()).filter(|&k| self.bounds[k] == Bound::Free).collect()
    }

    /// Solves the equality-constrained subproblem on the current working set.
    /// Returns the target free values and row multipliers (eq rows then active rows).
    fn solve_eqp(&self, h: &DMatrix<f64>) -> Option<(Vec<usize>, DVector<f64>, DVector<f64>)> {
        let free = self.free();
        let f = free.len();
        let me = self.eq_rows.len();
        let ma = self.active.len();
        let m = me + ma;
        let dim = f + m;
        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let fixed: Vec<usize> = (0..self.z.len()).filter(|&j| self.bounds[j] != Bound::Free).collect();
        for (a, &ia) in free.iter().enumerate() {
            for (b, &ib) in free.iter().enumerate() {
                k[(a, b)] = h[(ia, ib)];
            }
            let mut r = -self.p.g[ia];
            for &j in &fixed {
                r -= h[(ia, j)] * self.z[j];
            }
            rhs[a] = r;
        }
        for r in 0..m {
            let (row, b) = if r < me {
                let i = self.eq_rows[r];
                (self.p.a_eq.row(i), self.p.b_eq[i])
            } else {
                let i = self.active[r - me];
                (self.p.a_in.row(i), self.p.b_in[i])
            };
            for (a, &ia) in free.iter().enumerate() {
                k[(f + r, a)] = row[ia];
                k[(a, f + r)] = row[ia];
            }
            let mut rr = b;
            for &j in &fixed {
                rr -= row[j] * self.z[j];
            }
            rhs[f + r] = rr;
        }
        if dim == 0 {
            return Some((free, DVector::zeros(0), DVector::zeros(0)));
        }
        if let Some(sol) = diagonal_schur(&k, &rhs, f) {
            return Some((free, sol.rows(0, f).into_owned(), sol.rows(f, m).into_owned()));
        }
        let sol = k.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let target = sol.rows(0, f).into_owned();
        let mult = sol.rows(f, m).into_owned();
        Some((free, target, mult))
    }

    /// Returns `Ok(true)` at optimality, `Ok(false)` when the iteration budget runs out.
    fn run(&mut self, max_iter: usize) -> Result<bool, QpError> {
        let n = self.z.len();
        let h_norm = self.p.h.amax().max(1.0);
        while self.iterations < max_iter {
            self.iterations += 1;
            let basis = self.prune_dependent_rows();
            let (free, target, mult) = self.solve_eqp(self.h).ok_or(QpError::Singular)?;
            let mut step = DVector::zeros(n);
            for (a, &ia) in free.iter().enumerate() {
                step[ia] = target[a] - self.z[ia];
            }
            let znorm = 1.0 + self.z.amax();
            let pnorm = step.amax();
            if pnorm <= 1e-13 * znorm {
                for (a, &ia) in free.iter().enumerate() {
                    self.z[ia] = target[a];
                }
                let me = self.eq_rows.len();
                self.eq_mult = mult.rows(0, me).iter().copied().collect();
                self.in_mult = mult.rows(me, self.active.len()).iter().copied().collect();
                self.stalls += 1;
                match self.most_negative_multiplier() {
                    None => return Ok(true),
                    Some(Drop::Row(pos)) => {
                        self.active.remove(pos);
                    }
                    Some(Drop::Bound(k)) => self.bounds[k] = Bound::Free,
                }
                continue;
            }

            // ratio test
            let mut alpha = 1.0;
            let mut block: Option<Block> = None;
            let implied_bound = |k: usize| {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                orthogonal_residual(&basis, &e).is_none()
            };
            for &k in &free {
                let pk = step[k];
                if pk.abs() <= 1e-13 * pnorm {
                    continue;
                }
                if pk < 0.0 && self.p.lower[k].is_finite() {
                    let ratio = ((self.z[k] - self.p.lower[k]).max(0.0)) / -pk;
                    if ratio < alpha && !implied_bound(k) {
                        alpha = ratio;
                        block = Some(Block::Lower(k));
                    }
                } else if pk > 0.0 && self.p.upper[k].is_finite() {
                    let ratio = ((self.p.upper[k] - self.z[k]).max(0.0)) / pk;
                    if ratio < alpha && !implied_bound(k) {
                        alpha = ratio;
                        block = Some(Block::Upper(k));
                    }
                }
            }
            for i in 0..self.p.a_in.nrows() {
                if self.active.contains(&i) {
                    continue;
                }
                let row = self.p.a_in.row(i);
                let ap = row.dot(&step.transpose());
                let row_norm = row.amax();
                if ap <= 1e-13 * row_norm * pnorm {
                    continue;
                }
                let slack = (self.p.b_in[i] - row.dot(&self.z.transpose())).max(0.0);
                let ratio = slack / ap;
                // a row implied by the working set cannot block; `ap` is round-off
                if ratio < alpha && orthogonal_residual(&basis, &self.restrict(&row.transpose())).is_some() {
                    alpha = ratio;
                    block = Some(Block::Row(i));
                }
            }

            if block.is_none() {
                let curvature = step.dot(&(&self.p.h * &step));
                if pnorm > 1e9 * znorm && curvature <= 1e-8 * h_norm * pnorm * pnorm {
                    return Err(QpError::Unbounded);
                }
                for (a, &ia) in free.iter().enumerate() {
                    self.z[ia] = target[a];
                }
                continue;
            }
            if alpha * pnorm > 1e-12 * znorm {
                self.stalls = 0;
            } else {
                self.stalls += 1;
            }
            self.z.axpy(alpha, &step, 1.0);
            for &k in &free {
                self.z[k] = self.z[k].clamp(self.p.lower[k], self.p.upper[k]);
            }
            match block.unwrap() {
                Block::Lower(k) => {
                    self.z[k] = self.p.lower[k];
                    self.bounds[k] = Bound::Lower;
                }
                Block::Upper(k) => {
                    self.z[k] = self.p.upper[k];
                    self.bounds[k] = Bound::Upper;
                }
                Block::Row(i) => self.active.push(i),
            }
        }
        Ok(false)
    }

    fn reduced_gradient(&self) -> DVector<f64> {
        let mut r = self.h * &self.z + &self.p.g;
        for (a, &i) in self.eq_rows.iter().enumerate() {
            r.axpy(self.eq_mult[a], &self.p.a_eq.row(i).transpose(), 1.0);
        }
        for (a, &i) in self.active.iter().enumerate() {
            r.axpy(self.in_mult[a], &self.p.a_in.row(i).transpose(), 1.0);
        }
        r
    }

    fn most_negative_multiplier(&self) -> Option<Drop> {
        let r = self.reduced_gradient();
        let scale = 1.0 + (self.h * &self.z + &self.p.g).amax();
        let thresh = -(1e-3 * self.tol).max(1e-14) * scale;
        let bland = self.stalls > BLAND_AFTER;
        let mut worst = thresh;
        let mut out = None;
        for (k, b) in self.bounds.iter().enumerate() {
            let m = match b {
                Bound::Lower => r[k],
                Bound::Upper => -r[k],
                _ => continue,
            };
            if m < worst {
                if bland {
                    return Some(Drop::Bound(k));
                }
                worst = m;
                out = Some(Drop::Bound(k));
            }
        }
        if bland {
            return (0..self.in_mult.len())
                .filter(|&pos| self.in_mult[pos] < thresh)
                .min_by_key(|&pos| self.active[pos])
                .map(Drop::Row);
        }
        for (pos, &m) in self.in_mult.iter().enumerate() {
            if m < worst {
                worst = m;
                out = Some(Drop::Row(pos));
            }
        }
        out
    }

    /// Re-solve the final working set with the unregularized Hessian when possible.
    fn polish(&mut self) {
        if self.h == &self.p.h {
            return;
        }
        let Some((free, target, mult)) = self.solve_eqp(&self.p.h) else {
            return;
        };
        let mut cand = self.z.clone();
        for (a, &ia) in free.iter().enumerate() {
            cand[ia] = target[a];
        }
        if (&cand - &self.z).amax() > 1e-6 * (1.0 + self.z.amax()) {
            return;
        }
        let me = self.eq_rows.len();
        let eq: Vec<f64> = mult.rows(0, me).iter().copied().collect();
        let ineq: Vec<f64> = mult.rows(me, self.active.len()).iter().copied().collect();
        let before = self.build_solution(self.z.clone(), &self.eq_mult, &self.in_mult, 0);
        let after = self.build_solution(cand.clone(), &eq, &ineq, 0);
        let rb = kkt_residual(self.p, &before.z, &before.duals());
        let ra = kkt_residual(self.p, &after.z, &after.duals());
        if ra <= rb {
            self.z = cand;
            self.eq_mult = eq;
            self.in_mult = ineq;
        }
    }

    fn into_solution(self, iterations: usize) -> QpSolution {
        self.build_solution(self.z.clone(), &self.eq_mult, &self.in_mult, iterations)
    }

    fn build_solution(&self, z: DVector<f64>, eq_mult: &[f64], in_mult: &[f64], iterations: usize) -> QpSolution {
        let n = z.len();
        let p = self.p;
        let mut eq_duals = DVector::zeros(p.a_eq.nrows());
        if eq_mult.len() == self.eq_rows.len() {
            for (a, &i) in self.eq_rows.iter().enumerate() {
                eq_duals[i] = eq_mult[a];
            }
        }
        let mut in_duals = DVector::zeros(p.a_in.nrows());
        if in_mult.len() == self.active.len() {
            for (a, &i) in self.active.iter().enumerate() {
                in_duals[i] = in_mult[a];
            }
        }
        // bound multipliers from the unregularized stationarity condition
        let mut r = &p.h * &z + &p.g;
        if p.a_eq.nrows() > 0 {
            r += p.a_eq.transpose() * &eq_duals;
        }
        if p.a_in.nrows() > 0 {
            r += p.a_in.transpose() * &in_duals;
        }
        let mut lower_duals = DVector::zeros(n);
        let mut upper_duals = DVector::zeros(n);
        for k in 0..n {
            match self.bounds[k] {
                Bound::Lower => lower_duals[k] = r[k],
                Bound::Upper => upper_duals[k] = -r[k],
                Bound::Fixed => {
                    if r[k] >= 0.0 {
                        lower_duals[k] = r[k];
                    } else {
                        upper_duals[k] = -r[k];
                    }
                }
                Bound::Free => {}
            }
        }
        let pick = |want: Bound| (0..n).filter(|&k| self.bounds[k] == want).collect();
        let working_set = WorkingSet { rows: self.active.clone(), lower: pick(Bound::Lower), upper: pick(Bound::Upper) };
        QpSolution {
            working_set,
            z,
            eq_duals,
            in_duals,
            lower_duals,
            upper_duals,
            status: QpStatus::Optimal,
            kkt_residual: 0.0,
            iterations,
        }
    }
}

enum Drop {
    Row(usize),
    Bound(usize),
}

enum Block {
    Lower(usize),
    Upper(usize),
    Row(usize),
}
