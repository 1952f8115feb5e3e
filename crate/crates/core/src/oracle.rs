//! Centralized reference solver and optimality checks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::layout::Layout;
use crate::problem::{aggregate, ProblemInstance};
use crate::qp::{solve_qp, QpError, QpOptions, QpProblem};
use crate::resolvents::ProjectionKernel;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("coupled problem is infeasible (violation {0:.3e})")]
    Infeasible(f64),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// The coupled problem as one QP in the stacked decision `x`.
#[derive(Clone, Debug)]
pub struct CentralizedQp {
    pub problem: QpProblem,
    pub constant: f64,
    /// Number of leading inequality rows that are the shared constraint.
    pub shared_rows: usize,
}

/// `z_i = P_i x` with `z_i = [x_i; Σ_{j≠i} A_j x_j]`.
fn selector(instance: &ProblemInstance, i: usize) -> DMatrix<f64> {
    let offs = instance.offsets();
    let total = instance.total_dim();
    let ni = instance.agent(i).n();
    let l = instance.l();
    let mut p = DMatrix::zeros(ni + l, total);
    for k in 0..ni {
        p[(k, offs[i] + k)] = 1.0;
    }
    for (j, a) in instance.agents().iter().enumerate() {
        if j != i {
            p.view_mut((ni, offs[j]), (l, a.n())).copy_from(&a.coupling);
        }
    }
    p
}

/// Substitutes `σ_i = Σ_{j≠i} A_j x_j` into every objective and stacks all constraints.
pub fn assemble_centralized(instance: &ProblemInstance) -> CentralizedQp {
    let total = instance.total_dim();
    let l = instance.l();
    let mut h = DMatrix::zeros(total, total);
    let mut g = DVector::zeros(total);
    let mut constant = 0.0;
    for (i, a) in instance.agents().iter().enumerate() {
        let p = selector(instance, i);
        h += p.transpose() * &a.objective.h * &p;
        g += p.tr_mul(&a.objective.g);
        constant += a.objective.constant;
    }
    h = (&h + h.transpose()) * 0.5;
    let offs = instance.offsets();
    let local_rows: usize = instance.agents().iter().map(|a| a.feasible_set.g.nrows()).sum();
    let mut a_in = DMatrix::zeros(l + local_rows, total);
    let mut b_in = DVector::zeros(l + local_rows);
    b_in.rows_mut(0, l).copy_from(instance.capacity());
    let mut lower = DVector::zeros(total);
    let mut upper = DVector::zeros(total);
    let mut row = l;
    for (i, a) in instance.agents().iter().enumerate() {
        let n = a.n();
        a_in.view_mut((0, offs[i]), (l, n)).copy_from(&a.coupling);
        let fs = &a.feasible_set;
        let m = fs.g.nrows();
        a_in.view_mut((row, offs[i]), (m, n)).copy_from(&(-&fs.g));
        b_in.rows_mut(row, m).copy_from(&(-&fs.h));
        lower.rows_mut(offs[i], n).copy_from(&fs.lower);
        upper.rows_mut(offs[i], n).copy_from(&fs.upper);
        row += m;
    }
    let problem = QpProblem::new(h, g).with_inequalities(a_in, b_in).with_bounds(lower, upper);
    CentralizedQp { problem, constant, shared_rows: l }
}

/// Minimizer `x*` (stacked) and multiplier `λ*` of the shared constraint.
pub fn solve_centralized(instance: &ProblemInstance, tol: f64) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    let c = assemble_centralized(instance);
    let opts = QpOptions { tol, ..QpOptions::default() };
    let sol = match solve_qp(&c.problem, &opts) {
        Ok(s) => s,
        Err(QpError::Infeasible { violation }) => return Err(OracleError::Infeasible(violation)),
        Err(e) => return Err(e.into()),
    };
    let lam = sol.in_duals.rows(0, c.shared_rows).into_owned();
    Ok((sol.z, lam))
}

/// `∇_{x_i} J(x)` including the cross terms through other agents' aggregates.
pub fn total_gradient(instance: &ProblemInstance, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n_agents = instance.n_agents();
    let l = instance.l();
    let mut sigma_grads = Vec::with_capacity(n_agents);
    let mut own = Vec::with_capacity(n_agents);
    for (i, a) in instance.agents().iter().enumerate() {
        let z = a.joint(&x[i], &aggregate(instance, x, i));
        let grad = a.objective.gradient(&z);
        own.push(grad.rows(0, a.n()).into_owned());
        sigma_grads.push(grad.rows(a.n(), l).into_owned());
    }
    (0..n_agents)
        .map(|i| {
            let mut s = DVector::zeros(l);
            for (j, gj) in sigma_grads.iter().enumerate() {
                if j != i {
                    s += gj;
                }
            }
            &own[i] + instance.agent(i).coupling.tr_mul(&s)
        })
        .collect()
}

fn projection_gap(instance: &ProblemInstance, i: usize, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let fs = &instance.agent(i).feasible_set;
    let target = x - v;
    match fs.project(&target) {
        Ok(p) => (x - p).amax(),
        Err(_) => f64::INFINITY,
    }
}

/// Max of stationarity (projection form), dual sign, primal feasibility and complementarity.
pub fn kkt_check(instance: &ProblemInstance, x: &[DVector<f64>], lambda: &DVector<f64>) -> f64 {
    let grads = total_gradient(instance, x);
    let mut r: f64 = 0.0;
    for (i, a) in instance.agents().iter().enumerate() {
        let v = &grads[i] + a.coupling.tr_mul(lambda);
        r = r.max(projection_gap(instance, i, &x[i], &v));
        r = r.max(a.feasible_set.violation(&x[i]));
    }
    let slack = instance.capacity() - instance.total_coupling(x);
    for k in 0..lambda.len() {
        r = r.max(-lambda[k]).max(-slack[k]).max((lambda[k] * slack[k]).abs());
    }
    r
}

/// Per-agent tuple of the decomposed KKT system.
#[derive(Clone, Debug)]
pub struct DecomposedTuple {
    pub x: DVector<f64>,
    pub sigma: DVector<f64>,
    /// Multiplier of `A_i x_i + σ_i <= c`.
    pub lambda: DVector<f64>,
    /// Multiplier of `σ_i = Σ_{j≠i} A_j x_j`.
    pub d: DVector<f64>,
}

/// Residual of the per-agent KKT inclusions, including the aggregate equality itself.
pub fn decomposed_kkt_check(instance: &ProblemInstance, tuples: &[DecomposedTuple]) -> f64 {
    let l = instance.l();
    let xs: Vec<DVector<f64>> = tuples.iter().map(|t| t.x.clone()).collect();
    let mut r: f64 = 0.0;
    for (i, (a, t)) in instance.agents().iter().zip(tuples).enumerate() {
        let grad = a.objective.gradient(&a.joint(&t.x, &t.sigma));
        let n = a.n();
        let mut others = DVector::zeros(l);
        for (j, tj) in tuples.iter().enumerate() {
            if j != i {
                others += &tj.d;
            }
        }
        let v = grad.rows(0, n) + a.coupling.tr_mul(&t.lambda) - a.coupling.tr_mul(&others);
        r = r.max(projection_gap(instance, i, &t.x, &v));
        r = r.max(a.feasible_set.violation(&t.x));
        let s_res = grad.rows(n, l) + &t.lambda + &t.d;
        r = r.max(s_res.amax());
        r = r.max((&t.sigma - aggregate(instance, &xs, i)).amax());
        let slack = instance.capacity() - (&a.coupling * &t.x + &t.sigma);
        for k in 0..l {
            r = r.max(-t.lambda[k]).max(-slack[k]).max((t.lambda[k] * slack[k]).abs());
        }
    }
    r
}

/// Maps `(x, λ)` to decomposed tuples with `λ_i = λ/N` and `d_i = −∇_σ J_i − λ_i`.
pub fn decompose(instance: &ProblemInstance, x: &[DVector<f64>], lambda: &DVector<f64>) -> Vec<DecomposedTuple> {
    let share = lambda / instance.n_agents() as f64;
    let l = instance.l();
    instance
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let sigma = aggregate(instance, x, i);
            let grad = a.objective.gradient(&a.joint(&x[i], &sigma));
            let d = -grad.rows(a.n(), l).into_owned() - &share;
            DecomposedTuple { x: x[i].clone(), sigma, lambda: share.clone(), d }
        })
        .collect()
}

/// Distance from 0 to `𝒯ψ`: per agent the natural residual `‖z − proj_C(z − v)‖∞` over
/// `z = (x_i, σ_i, y_i, y_ji …)` with `C` the intersection of the local sets, plus the
/// λ rows (edge disagreement) and μ rows (estimate disagreement).
pub fn operator_zero_residual(instance: &ProblemInstance, psi: &DVector<f64>) -> f64 {
    let lay = Layout::new(instance);
    let graph = instance.graph();
    let v = psi.as_slice();
    let l = lay.l();
    let mut r: f64 = 0.0;
    let sums: Vec<DVector<f64>> = (0..instance.n_agents())
        .map(|i| &instance.agent(i).coupling * DVector::from_column_slice(&v[lay.x(i)]) + DVector::from_column_slice(&v[lay.sigma(i)]))
        .collect();
    for e in 0..graph.n_edges() {
        let (tail, head) = graph.edge(e);
        r = r.max((&sums[head] - &sums[tail]).amax());
        for k in 0..l {
            r = r.max((v[lay.y(tail).start + k] - v[lay.y_est(e).start + k]).abs());
        }
    }
    for i in 0..instance.n_agents() {
        let a = instance.agent(i);
        let n = a.n();
        let ins = graph.in_edges(i);
        let ones = vec![1.0; ins.len()];
        let kernel = ProjectionKernel::new(instance, i, 1.0, 1.0, 1.0, &ones);
        let mut z = DVector::zeros(kernel.dim());
        z.rows_mut(0, n).copy_from_slice(&v[lay.x(i)]);
        z.rows_mut(n, l).copy_from_slice(&v[lay.sigma(i)]);
        z.rows_mut(n + l, l).copy_from_slice(&v[lay.y(i)]);
        for (s, &e) in ins.iter().enumerate() {
            z.rows_mut(n + l * (2 + s), l).copy_from_slice(&v[lay.y_est(e)]);
        }
        let grad = a.objective.gradient(&z.rows(0, n + l).into_owned());
        let lam_ib = crate::resolvents::incidence_sum(l, graph.incident_edges(i).iter().map(|&e| (graph.orientation(i, e), &v[lay.lambda(e)])));
        let mut op = DVector::zeros(kernel.dim());
        op.rows_mut(0, n).copy_from(&(grad.rows(0, n) + a.coupling.tr_mul(&lam_ib)));
        op.rows_mut(n, l).copy_from(&(grad.rows(n, l) + &lam_ib));
        for &e in graph.out_edges(i) {
            for k in 0..l {
                op[n + l + k] -= v[lay.mu(e).start + k];
            }
        }
        for (s, &e) in ins.iter().enumerate() {
            for k in 0..l {
                op[n + l * (2 + s) + k] = v[lay.mu(e).start + k];
            }
        }
        let mut p = kernel.problem().clone();
        p.g = -(&z - &op);
        let proj = match solve_qp(&p, &QpOptions::default().with_warm_start(kernel.feasible_start().clone())) {
            Ok(s) => s.z,
            Err(QpError::MaxIter(s)) => s.z,
            Err(_) => return f64::INFINITY,
        };
        r = r.max((&z - proj).amax());
    }
    r
}
