//! Dense reference constructions used by the integration tests.
//!
//! Everything here is assembled from the instance data alone (matrices, graph
//! edges, step sizes) and never calls the library's resolvents or design matrix.
#![allow(dead_code)]

use aggsplit::engine::{Layout, StepSizes};
use aggsplit::problem::{build_problem, AgentSpec, CommGraph, LocalFeasibleSet, ProblemInstance, QuadraticObjective, WeightRule};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn manifest_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

/// Directed cycle plus a few random chords.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..rng.gen_range(0..=n) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && !edges.contains(&(a, b)) {
            edges.push((a, b));
        }
    }
    edges
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random agent over `n` decisions and `l` shared rows. The origin is strictly inside its
/// local set, so the instance satisfies Slater whenever `c > 0`.
pub fn random_agent(rng: &mut ChaCha8Rng, n: usize, l: usize) -> AgentSpec {
    let d = n + l;
    let f = random_matrix(rng, d, d);
    let mut h = &f * f.transpose() * 0.5;
    if rng.gen_bool(0.3) {
        // rank-deficient but still PSD
        let v = random_matrix(rng, d, 1);
        h = &v * v.transpose();
    }
    let g = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
    let lower = DVector::from_fn(n, |_, _| -rng.gen_range(0.2..2.0));
    let upper = DVector::from_fn(n, |_, _| rng.gen_range(0.2..2.0));
    let mut set = LocalFeasibleSet::boxed(lower, upper);
    if rng.gen_bool(0.5) {
        let m = rng.gen_range(1..=2);
        let gm = random_matrix(rng, m, n);
        let hv = DVector::from_fn(m, |_, _| -rng.gen_range(0.1..1.0));
        set = set.with_inequalities(gm, hv);
    }
    AgentSpec::new(QuadraticObjective::new(h, g, 0.0), set, random_matrix(rng, l, n))
}

/// Random instance with `N ≤ max_agents`, `n_i ≤ max_n`, `l ≤ max_l`.
pub fn random_instance(seed: u64, max_agents: usize, max_n: usize, max_l: usize) -> ProblemInstance {
    let mut r = rng(seed);
    let n_agents = r.gen_range(2..=max_agents);
    let l = r.gen_range(1..=max_l);
    let agents = (0..n_agents)
        .map(|_| {
            let n = r.gen_range(1..=max_n);
            random_agent(&mut r, n, l)
        })
        .collect();
    let c = DVector::from_fn(l, |_, _| r.gen_range(0.1..1.5));
    let edges = random_edges(&mut r, n_agents);
    let graph = CommGraph::new(n_agents, edges, WeightRule::default()).expect("cycle is connected");
    build_problem(agents, c, graph).expect("random instance is valid")
}

pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.gen_range(-scale..scale))
}

/// Node-edge incidence, `+1` at the head.
pub fn incidence(instance: &ProblemInstance) -> DMatrix<f64> {
    let g = instance.graph();
    let mut b = DMatrix::zeros(instance.n_agents(), g.n_edges());
    for (e, &(t, h)) in g.edges().iter().enumerate() {
        b[(h, e)] += 1.0;
        b[(t, e)] -= 1.0;
    }
    b
}

/// The coupling block `K` with `K[x_i, λ_e] = B_ie A_iᵀ` and `K[σ_i, λ_e] = B_ie I`.
fn coupling_block(instance: &ProblemInstance, lay: &Layout) -> DMatrix<f64> {
    let b = incidence(instance);
    let l = instance.l();
    let mut k = DMatrix::zeros(lay.dim(), lay.dim());
    for i in 0..instance.n_agents() {
        let a = &instance.agent(i).coupling;
        for e in 0..instance.graph().n_edges() {
            let s = b[(i, e)];
            if s == 0.0 {
                continue;
            }
            let lam = lay.lambda(e).start;
            let xs = lay.x(i).start;
            for r in 0..l {
                for c in 0..a.ncols() {
                    k[(xs + c, lam + r)] = s * a[(r, c)];
                }
                k[(lay.sigma(i).start + r, lam + r)] = s;
            }
        }
    }
    k
}

/// Skew block `M_y′` over the `ω` rows.
pub fn dense_my_prime(instance: &ProblemInstance, lay: &Layout) -> DMatrix<f64> {
    let g = instance.graph();
    let l = instance.l();
    let mut m = DMatrix::zeros(lay.dim(), lay.dim());
    for e in 0..g.n_edges() {
        let tail = g.edge(e).0;
        let (y, mu, est) = (lay.y(tail).start, lay.mu(e).start, lay.y_est(e).start);
        for r in 0..l {
            m[(y + r, mu + r)] = -1.0;
            m[(mu + r, y + r)] = 1.0;
            m[(mu + r, est + r)] = -1.0;
            m[(est + r, mu + r)] = 1.0;
        }
    }
    m
}

/// Linear part of `𝒜`: the halved primal-dual coupling plus `M_y′`.
pub fn dense_s_a(instance: &ProblemInstance, lay: &Layout) -> DMatrix<f64> {
    dense_s_b(instance, lay) + dense_my_prime(instance, lay)
}

/// Linear part of `ℬ`: the halved primal-dual coupling.
pub fn dense_s_b(instance: &ProblemInstance, lay: &Layout) -> DMatrix<f64> {
    let k = coupling_block(instance, lay);
    (&k - k.transpose()) * 0.5
}

/// Block-diagonal step sizes with the off-diagonal coupling of the design matrix.
pub fn dense_phi(instance: &ProblemInstance, lay: &Layout, steps: &StepSizes) -> DMatrix<f64> {
    let g = instance.graph();
    let mut d = DVector::zeros(lay.dim());
    for i in 0..instance.n_agents() {
        lay.x(i).for_each(|k| d[k] = 1.0 / steps.tau1[i]);
        lay.sigma(i).for_each(|k| d[k] = 1.0 / steps.tau2[i]);
        lay.omega(i).for_each(|k| d[k] = 1.0 / steps.tau4[i]);
    }
    for e in 0..g.n_edges() {
        lay.lambda(e).for_each(|k| d[k] = 1.0 / steps.tau3[e]);
    }
    let k = coupling_block(instance, lay);
    DMatrix::from_diagonal(&d) - (&k + k.transpose()) * 0.5
}

/// `∇ Σ J_i` over the `(x, σ)` rows, zero elsewhere.
pub fn objective_gradient(instance: &ProblemInstance, lay: &Layout, psi: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(lay.dim());
    for i in 0..instance.n_agents() {
        let obj = &instance.agent(i).objective;
        let z = DVector::from_iterator(lay.n(i) + lay.l(), lay.x(i).chain(lay.sigma(i)).map(|k| psi[k]));
        let grad = &obj.h * z + &obj.g;
        for (p, k) in lay.x(i).chain(lay.sigma(i)).enumerate() {
            out[k] = grad[p];
        }
    }
    out
}

/// `‖Φ(ψ − ψ̃) + ∇J(ψ) + S_A ψ‖`: zero exactly when `ψ = J_{Φ⁻¹𝒜}(ψ̃)`.
pub fn inclusion_residual_a(instance: &ProblemInstance, steps: &StepSizes, tilde: &DVector<f64>, psi: &DVector<f64>) -> f64 {
    let lay = Layout::new(instance);
    let phi = dense_phi(instance, &lay, steps);
    (phi * (psi - tilde) + objective_gradient(instance, &lay, psi) + dense_s_a(instance, &lay) * psi).norm()
}

/// Constraint set of `ℬ` over the full stacked vector: rows `a z <= b` (inequalities) and `e z = 0`.
pub struct DenseConstraints {
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq: DMatrix<f64>,
}

pub fn dense_constraints(instance: &ProblemInstance, lay: &Layout) -> DenseConstraints {
    let g = instance.graph();
    let l = instance.l();
    let w = g.weight_matrix();
    let big_n = instance.n_agents() as f64;
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut eq_rows: Vec<DVector<f64>> = Vec::new();
    let unit = |k: usize, s: f64| {
        let mut v = DVector::zeros(lay.dim());
        v[k] = s;
        v
    };
    for i in 0..instance.n_agents() {
        let agent = instance.agent(i);
        let fs = &agent.feasible_set;
        let xs = lay.x(i).start;
        for k in 0..agent.n() {
            if fs.lower[k].is_finite() {
                rows.push((unit(xs + k, -1.0), -fs.lower[k]));
            }
            if fs.upper[k].is_finite() {
                rows.push((unit(xs + k, 1.0), fs.upper[k]));
            }
        }
        for r in 0..fs.g.nrows() {
            let mut v = DVector::zeros(lay.dim());
            for c in 0..agent.n() {
                v[xs + c] = -fs.g[(r, c)];
            }
            rows.push((v, -fs.h[r]));
        }
        for r in 0..l {
            let mut v = unit(lay.sigma(i).start + r, 1.0);
            for c in 0..agent.n() {
                v[xs + c] = agent.coupling[(r, c)];
            }
            rows.push((v, instance.capacity()[r]));
        }
        // (N − 1) A_i x_i − σ_i − W_ii y_i − Σ_j W_ji y_ji = 0
        for r in 0..l {
            let mut v = unit(lay.sigma(i).start + r, -1.0);
            for c in 0..agent.n() {
                v[xs + c] = (big_n - 1.0) * agent.coupling[(r, c)];
            }
            v[lay.y(i).start + r] = -w[(i, i)];
            for &e in g.in_edges(i) {
                let j = g.edge(e).0;
                v[lay.y_est(e).start + r] = -w[(j, i)];
            }
            eq_rows.push(v);
        }
    }
    let stack = |vs: Vec<&DVector<f64>>| DMatrix::from_fn(vs.len(), lay.dim(), |r, c| vs[r][c]);
    DenseConstraints {
        ineq: stack(rows.iter().map(|(v, _)| v).collect()),
        ineq_rhs: DVector::from_iterator(rows.len(), rows.iter().map(|(_, b)| *b)),
        eq: stack(eq_rows.iter().collect()),
    }
}

/// Minimum-norm least squares through the eigendecomposition of `EᵀE`, refined once.
pub fn least_squares(e: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(e.transpose() * e);
    let cut = 1e-12 * eig.eigenvalues.amax().max(1e-300);
    let pinv = |b: &DVector<f64>| {
        let c = eig.eigenvectors.transpose() * e.transpose() * b;
        let scaled = DVector::from_fn(c.len(), |k, _| if eig.eigenvalues[k] > cut { c[k] / eig.eigenvalues[k] } else { 0.0 });
        &eig.eigenvectors * scaled
    };
    let z = pinv(r);
    let fix = pinv(&(r - e * &z));
    z + fix
}

/// Least squares with sign constraints on the first `n_nonneg` unknowns (Lawson-Hanson).
pub fn nnls(e: &DMatrix<f64>, r: &DVector<f64>, n_nonneg: usize) -> DVector<f64> {
    let m = e.ncols();
    let mut passive: Vec<bool> = (0..m).map(|k| k >= n_nonneg).collect();
    let solve_on = |passive: &[bool]| -> DVector<f64> {
        let cols: Vec<usize> = (0..m).filter(|&k| passive[k]).collect();
        let mut z = DVector::zeros(m);
        if cols.is_empty() {
            return z;
        }
        let sub = DMatrix::from_fn(e.nrows(), cols.len(), |a, b| e[(a, cols[b])]);
        let s = least_squares(&sub, r);
        for (p, &k) in cols.iter().enumerate() {
            z[k] = s[p];
        }
        z
    };
    let mut z = solve_on(&passive);
    for _ in 0..3 * m + 10 {
        let grad = e.transpose() * (r - e * &z);
        let pick = (0..n_nonneg).filter(|&k| !passive[k] && grad[k] > 1e-13).max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(t) = pick else { break };
        passive[t] = true;
        loop {
            let s = solve_on(&passive);
            let bad: Vec<usize> = (0..n_nonneg).filter(|&k| passive[k] && s[k] <= 0.0).collect();
            if bad.is_empty() {
                z = s;
                break;
            }
            let alpha = bad.iter().map(|&k| z[k] / (z[k] - s[k])).fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
            z += (&s - &z) * alpha;
            for k in 0..n_nonneg {
                if passive[k] && z[k] <= 1e-15 {
                    passive[k] = false;
                    z[k] = 0.0;
                }
            }
        }
    }
    z
}

/// Distance of `v` from the normal cone of the `ℬ` constraint set at `z`, plus the
/// constraint violation of `z`. Inequalities within `active_tol` of their bound count as active.
pub fn normal_cone_residual(c: &DenseConstraints, z: &DVector<f64>, v: &DVector<f64>, active_tol: f64) -> f64 {
    let slack = &c.ineq_rhs - &c.ineq * z;
    let violation = slack.iter().fold(0.0f64, |a, &s| a.max(-s)).max((&c.eq * z).amax());
    let active: Vec<usize> = (0..slack.len()).filter(|&r| slack[r] <= active_tol).collect();
    let cols = active.len() + c.eq.nrows();
    let e = DMatrix::from_fn(z.len(), cols, |row, col| {
        if col < active.len() {
            c.ineq[(active[col], row)]
        } else {
            c.eq[(col - active.len(), row)]
        }
    });
    let mult = nnls(&e, v, active.len());
    (e * mult - v).norm().max(violation)
}

/// `Φ(ψ̂ − ψ̄) − S_B ψ̄` must be a normal vector of the constraint set at `ψ̄`.
pub fn inclusion_residual_b(instance: &ProblemInstance, steps: &StepSizes, hat: &DVector<f64>, bar: &DVector<f64>) -> f64 {
    let lay = Layout::new(instance);
    let phi = dense_phi(instance, &lay, steps);
    let v = phi * (hat - bar) - dense_s_b(instance, &lay) * bar;
    normal_cone_residual(&dense_constraints(instance, &lay), bar, &v, 1e-9)
}

/// `⟨a, b⟩_Φ`.
pub fn phi_inner(phi: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(&(phi * b))
}

/// Least-squares slope and `R²` of `ys` against their indices.
pub fn linear_fit(ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (k, &y) in ys.iter().enumerate() {
        let dx = k as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Polytope `{lo ≤ z ≤ hi, C z ≤ d}` handled by Dykstra's alternating projections.
pub struct Polytope {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl Polytope {
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for k in 0..z.len() {
            v = v.max(self.lo[k] - z[k]).max(z[k] - self.hi[k]);
        }
        for r in 0..self.c.nrows() {
            v = v.max(self.c.row(r).dot(&z.transpose()) - self.d[r]);
        }
        v
    }

    pub fn project(&self, p: &DVector<f64>) -> DVector<f64> {
        let m = self.c.nrows();
        let mut z = p.clone();
        let mut inc = vec![DVector::zeros(p.len()); m + 1];
        for _ in 0..20_000 {
            let before = z.clone();
            for r in 0..m {
                let y = &z + &inc[r];
                let row = self.c.row(r).transpose();
                let over = row.dot(&y) - self.d[r];
                let next = if over > 0.0 { &y - &row * (over / row.norm_squared()) } else { y.clone() };
                inc[r] = &y - &next;
                z = next;
            }
            let y = &z + &inc[m];
            let next = DVector::from_fn(y.len(), |k, _| y[k].clamp(self.lo[k], self.hi[k]));
            inc[m] = &y - &next;
            z = next;
            if (&z - &before).amax() < 1e-15 {
                break;
            }
        }
        z
    }
}

fn clamp(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |k, _| z[k].clamp(lo[k], hi[k]))
}

/// Accelerated projected gradient over the box on a smooth convex `f` with gradient `grad`.
fn box_fista(
    f: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    lip: f64,
    set: &Polytope,
    start: DVector<f64>,
    iters: usize,
    tol: f64,
) -> DVector<f64> {
    let step = 1.0 / lip;
    let mut x = clamp(&start, &set.lo, &set.hi);
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    for _ in 0..iters {
        let next = clamp(&(&y - grad(&y) * step), &set.lo, &set.hi);
        if f(&next) > f(&x) {
            // adaptive restart
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
        // natural residual of the inner problem
        if (&x - clamp(&(&x - grad(&x)), &set.lo, &set.hi)).amax() < tol {
            break;
        }
    }
    x
}

/// Minimizes `½zᵀHz + gᵀz` over the polytope by the method of multipliers on the `C z ≤ d`
/// rows, each inner problem solved by box-projected gradient. The penalty grows whenever
/// the row violation fails to shrink fast enough.
pub fn projected_gradient(h: &DMatrix<f64>, g: &DVector<f64>, set: &Polytope, iters: usize, tol: f64) -> DVector<f64> {
    let mut rho = 10.0;
    let mut mult = DVector::zeros(set.c.nrows());
    let mut x = DVector::zeros(g.len());
    let mut last_violation = f64::INFINITY;
    for _ in 0..200 {
        let lip = SymmetricEigen::new(h + set.c.transpose() * &set.c * rho).eigenvalues.max().max(1e-12);
        let shifted = |z: &DVector<f64>| (&set.c * z - &set.d + &mult / rho).map(|v| v.max(0.0));
        let f = |z: &DVector<f64>| 0.5 * z.dot(&(h * z)) + g.dot(z) + 0.5 * rho * shifted(z).norm_squared();
        let grad = |z: &DVector<f64>| h * z + g + set.c.tr_mul(&shifted(z)) * rho;
        x = box_fista(f, grad, lip, set, x.clone(), iters, tol);
        let rows = &set.c * &x - &set.d;
        let next_mult = (&mult + &rows * rho).map(|v| v.max(0.0));
        // rows that are violated, or slack rows still carrying a multiplier
        let violation = rows.iter().zip(mult.iter()).map(|(r, m)| if *m > 0.0 { r.abs() } else { r.max(0.0) }).fold(0.0, f64::max);
        let moved = (&next_mult - &mult).amax();
        mult = next_mult;
        if violation < tol && moved < tol * rho {
            break;
        }
        if violation > 0.25 * last_violation {
            rho = (rho * 4.0).min(1e8);
        }
        last_violation = violation;
    }
    x
}
