//! Resolvent evaluations and edge updates.
//!
//! The agent-side functions see only the agent's own data plus messages from
//! incident edges; the edge-side functions see only their endpoints' sums. The
//! engine and the network simulator both call these kernels, so their outputs
//! agree bit for bit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::layout::Layout;
use crate::problem::{AgentSpec, CommGraph, ProblemInstance};
use crate::qp::{solve_qp, QpError, QpOptions, QpProblem, WorkingSet};

#[derive(Debug, Error)]
pub enum ResolventError {
    #[error("prox system is singular")]
    SingularSystem,
    #[error("local projection of agent {agent} is infeasible (violation {violation:.3e})")]
    InfeasibleLocalProjection { agent: usize, violation: f64 },
    #[error("local projection of agent {agent} failed: {source}")]
    Qp { agent: usize, source: QpError },
}

/// `A_i x_i + σ_i`, the quantity exchanged with incident edges.
pub fn coupled_sum(a: &DMatrix<f64>, x: &[f64], sigma: &[f64]) -> DVector<f64> {
    let mut s = DVector::from_column_slice(sigma);
    s.gemv(1.0, a, &DVector::from_column_slice(x), 1.0);
    s
}

/// `λ_iB = Σ_in λ_ji − Σ_out λ_ij`, accumulated over `(edge, orientation, λ)` in the given order.
pub fn incidence_sum<'a>(l: usize, terms: impl IntoIterator<Item = (f64, &'a [f64])>) -> DVector<f64> {
    let mut s = DVector::<f64>::zeros(l);
    for (sign, lam) in terms {
        for r in 0..l {
            s[r] += sign * lam[r];
        }
    }
    s
}

/// `2ψ − ψ̃`, entrywise.
pub fn reflect(psi: &[f64], tilde: &[f64], out: &mut [f64]) {
    for k in 0..out.len() {
        out[k] = 2.0 * psi[k] - tilde[k];
    }
}

/// `ψ̃ + 2γ(ψ̄ − ψ)`, entrywise in place.
pub fn km_update(tilde: &mut [f64], psi: &[f64], bar: &[f64], gamma: f64) {
    for k in 0..tilde.len() {
        tilde[k] += 2.0 * gamma * (bar[k] - psi[k]);
    }
}

/// Cached factorization of `H_i + diag(1/τ1, 1/τ2)` for the prox step of `𝒜`.
#[derive(Clone, Debug)]
pub struct AgentKernel {
    n: usize,
    l: usize,
    tau1: f64,
    tau2: f64,
    chol: Cholesky<f64, Dyn>,
    g: DVector<f64>,
    a: DMatrix<f64>,
}

impl AgentKernel {
    pub fn new(agent: &AgentSpec, tau1: f64, tau2: f64) -> Option<Self> {
        let (n, l) = (agent.n(), agent.l());
        let mut m = agent.objective.h.clone();
        for k in 0..n {
            m[(k, k)] += 1.0 / tau1;
        }
        for k in n..n + l {
            m[(k, k)] += 1.0 / tau2;
        }
        let chol = Cholesky::new(m)?;
        Some(Self { n, l, tau1, tau2, chol, g: agent.objective.g.clone(), a: agent.coupling.clone() })
    }

    /// Minimizer of `J_i(x, σ) + ½λ̃_iBᵀ(A_i x + σ) + ‖x − x̃‖²/2τ1 + ‖σ − σ̃‖²/2τ2`.
    pub fn solve(&self, x_tilde: &[f64], sigma_tilde: &[f64], lambda_ib: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (n, l) = (self.n, self.l);
        let mut rhs = -&self.g;
        for k in 0..n {
            rhs[k] += x_tilde[k] / self.tau1;
        }
        for r in 0..l {
            rhs[n + r] += sigma_tilde[r] / self.tau2 - 0.5 * lambda_ib[r];
        }
        let at_lam = self.a.tr_mul(lambda_ib);
        for k in 0..n {
            rhs[k] -= 0.5 * at_lam[k];
        }
        let z = self.chol.solve(&rhs);
        (z.rows(0, n).into_owned(), z.rows(n, l).into_owned())
    }
}

/// Prox step of `𝒜` for one agent without a cached factorization.
pub fn resolvent_a_agent(
    agent: &AgentSpec,
    x_tilde: &[f64],
    sigma_tilde: &[f64],
    lambda_ib: &DVector<f64>,
    tau1: f64,
    tau2: f64,
) -> Result<(DVector<f64>, DVector<f64>), ResolventError> {
    let k = AgentKernel::new(agent, tau1, tau2).ok_or(ResolventError::SingularSystem)?;
    Ok(k.solve(x_tilde, sigma_tilde, lambda_ib))
}

/// `λ = λ̃ + ½τ3(ŝ_head − ŝ_tail)`.
pub fn resolvent_a_edge(lambda_tilde: &[f64], tau3: f64, tail_hat: &[f64], head_hat: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        lambda_tilde.len(),
        (0..lambda_tilde.len()).map(|r| lambda_tilde[r] + 0.5 * tau3 * (head_hat[r] - tail_hat[r])),
    )
}

/// `λ̄ = λ̂ + τ3[(s̄_head − s̄_tail) − ½(ŝ_head − ŝ_tail)]`.
pub fn resolvent_b_edge(
    lambda_hat: &[f64],
    tau3: f64,
    tail_bar: &[f64],
    head_bar: &[f64],
    tail_hat: &[f64],
    head_hat: &[f64],
) -> DVector<f64> {
    DVector::from_iterator(
        lambda_hat.len(),
        (0..lambda_hat.len()).map(|r| {
            lambda_hat[r] + tau3 * ((head_bar[r] - tail_bar[r]) - 0.5 * (head_hat[r] - tail_hat[r]))
        }),
    )
}

/// First ACU stage, run by the tail `i`: new `y_i` from `ỹ_i` and `(μ̃_ij, ỹ_ij)` of its out-edges.
pub fn acu_own(y_tilde: &[f64], out_terms: &[(&[f64], &[f64])], tau4: f64) -> DVector<f64> {
    let l = y_tilde.len();
    let t2 = tau4 * tau4;
    let deg = out_terms.len() as f64;
    let outer = (1.0 + t2) / (1.0 + t2 * (1.0 + deg));
    let inner = tau4 / (1.0 + t2);
    let mut sum = DVector::<f64>::zeros(l);
    for (mu, y) in out_terms {
        for r in 0..l {
            sum[r] += mu[r] + tau4 * y[r];
        }
    }
    DVector::from_iterator(l, (0..l).map(|r| outer * (y_tilde[r] + inner * sum[r])))
}

/// Second ACU stage, run by edge `(j, i)` with the tail's `τ4`.
pub fn acu_dual(mu_tilde: &[f64], estimate_tilde: &[f64], y_tail: &[f64], tau4_tail: f64) -> DVector<f64> {
    let t2 = tau4_tail * tau4_tail;
    DVector::from_iterator(
        mu_tilde.len(),
        (0..mu_tilde.len()).map(|r| mu_tilde[r] / (1.0 + t2) + tau4_tail / (1.0 + t2) * (estimate_tilde[r] - y_tail[r])),
    )
}

/// Third ACU stage, run by the head: `y_ji = ỹ_ji − τ4_j μ_ji`.
pub fn acu_estimate(estimate_tilde: &[f64], mu: &[f64], tau4_tail: f64) -> DVector<f64> {
    DVector::from_iterator(estimate_tilde.len(), (0..mu.len()).map(|r| estimate_tilde[r] - tau4_tail * mu[r]))
}

/// Full ACU over the `ω` part of a stacked vector: reads `ω̃` from `tilde`, writes `ω` into `out`.
pub fn acu(layout: &Layout, graph: &CommGraph, tau4: &[f64], tilde: &[f64], out: &mut [f64]) {
    let n = layout.n_agents();
    for i in 0..n {
        let terms: Vec<(&[f64], &[f64])> = graph
            .out_edges(i)
            .iter()
            .map(|&e| (&tilde[layout.mu(e)], &tilde[layout.y_est(e)]))
            .collect();
        let y = acu_own(&tilde[layout.y(i)], &terms, tau4[i]);
        out[layout.y(i)].copy_from_slice(y.as_slice());
    }
    for e in 0..graph.n_edges() {
        let tail = graph.edge(e).0;
        let mu = acu_dual(&tilde[layout.mu(e)], &tilde[layout.y_est(e)], &out[layout.y(tail)], tau4[tail]);
        out[layout.mu(e)].copy_from_slice(mu.as_slice());
    }
    for e in 0..graph.n_edges() {
        let tail = graph.edge(e).0;
        let est = acu_estimate(&tilde[layout.y_est(e)], &out[layout.mu(e)], tau4[tail]);
        out[layout.y_est(e)].copy_from_slice(est.as_slice());
    }
}

/// Local equality matrix `[(N−1)A_i, −I, −W_ii I, −W_ji I …]` over `[x_i; σ_i; y_i; y_ji …]`,
/// with in-neighbors in ascending tail order.
pub fn local_equality_matrix(instance: &ProblemInstance, i: usize) -> DMatrix<f64> {
    let agent = instance.agent(i);
    let graph = instance.graph();
    let (n, l) = (agent.n(), agent.l());
    let n_agents = instance.n_agents();
    let ins = graph.in_edges(i);
    let w = graph.weight_matrix();
    let mut m = DMatrix::zeros(l, n + l * (2 + ins.len()));
    m.view_mut((0, 0), (l, n)).copy_from(&(&agent.coupling * (n_agents as f64 - 1.0)));
    for r in 0..l {
        m[(r, n + r)] = -1.0;
        m[(r, n + l + r)] = -w[(i, i)];
        for (s, &e) in ins.iter().enumerate() {
            let tail = graph.edge(e).0;
            m[(r, n + l * (2 + s) + r)] = -w[(tail, i)];
        }
    }
    m
}

/// Result of the `ℬ` projection for one agent.
#[derive(Clone, Debug)]
pub struct ProjectionOutput {
    pub x: DVector<f64>,
    pub sigma: DVector<f64>,
    pub y_own: DVector<f64>,
    /// Estimates of in-neighbors' `y`, ascending tail order.
    pub y_in: Vec<DVector<f64>>,
    /// Duals of `A_i x_i + σ_i <= c`.
    pub d2: DVector<f64>,
    /// Duals of the local equality `M_F z = 0`.
    pub eq_duals: DVector<f64>,
    /// Stacked primal `[x; σ; y_i; y_ji …]`, reusable as a warm start.
    pub z: DVector<f64>,
    pub working_set: WorkingSet,
}

impl ProjectionOutput {
    /// Warm start for the next call on the same kernel.
    pub fn warm(&self) -> (&DVector<f64>, &WorkingSet) {
        (&self.z, &self.working_set)
    }
}

/// Fixed data of agent `i`'s `ℬ` projection QP; only the target point changes between calls.
#[derive(Clone, Debug)]
pub struct ProjectionKernel {
    agent: usize,
    n: usize,
    l: usize,
    n_in: usize,
    tau1: f64,
    tau2: f64,
    weights: DVector<f64>,
    template: QpProblem,
    start: DVector<f64>,
}

impl ProjectionKernel {
    /// `tau4_in` holds the tails' `τ4` for each in-edge in ascending tail order.
    pub fn new(instance: &ProblemInstance, i: usize, tau1: f64, tau2: f64, tau4: f64, tau4_in: &[f64]) -> Self {
        let agent = instance.agent(i);
        let (n, l) = (agent.n(), agent.l());
        let n_in = instance.graph().in_degree(i);
        let dim = n + l * (2 + n_in);
        let mut weights = DVector::zeros(dim);
        for k in 0..n {
            weights[k] = 1.0 / tau1;
        }
        for r in 0..l {
            weights[n + r] = 1.0 / tau2;
            weights[n + l + r] = 1.0 / tau4;
            for (s, t) in tau4_in.iter().enumerate() {
                weights[n + l * (2 + s) + r] = 1.0 / t;
            }
        }
        let m_f = local_equality_matrix(instance, i);
        let fs = &agent.feasible_set;
        let m_local = fs.g.nrows();
        let mut a_in = DMatrix::zeros(l + m_local, dim);
        let mut b_in = DVector::zeros(l + m_local);
        a_in.view_mut((0, 0), (l, n)).copy_from(&agent.coupling);
        for r in 0..l {
            a_in[(r, n + r)] = 1.0;
            b_in[r] = instance.capacity()[r];
        }
        a_in.view_mut((l, 0), (m_local, n)).copy_from(&(-&fs.g));
        b_in.rows_mut(l, m_local).copy_from(&(-&fs.h));
        let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(dim, f64::INFINITY);
        lower.rows_mut(0, n).copy_from(&fs.lower);
        upper.rows_mut(0, n).copy_from(&fs.upper);
        let template = QpProblem::new(DMatrix::from_diagonal(&weights), DVector::zeros(dim))
            .with_equalities(m_f, DVector::zeros(l))
            .with_inequalities(a_in, b_in)
            .with_bounds(lower, upper);

        // feasible point: anchor x, σ tight on the capacity, in-estimates zero, y_i from the equality
        let anchor = instance.anchor(i);
        let mut start = DVector::zeros(dim);
        start.rows_mut(0, n).copy_from(anchor);
        let ax = &agent.coupling * anchor;
        let w_ii = instance.graph().weight_matrix()[(i, i)];
        let big_n = instance.n_agents() as f64;
        for r in 0..l {
            let sigma = instance.capacity()[r] - ax[r];
            start[n + r] = sigma;
            start[n + l + r] = ((big_n - 1.0) * ax[r] - sigma) / w_ii;
        }
        Self { agent: i, n, l, n_in, tau1, tau2, weights, template, start }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn problem(&self) -> &QpProblem {
        &self.template
    }

    /// Feasible point used when no warm start is supplied.
    pub fn feasible_start(&self) -> &DVector<f64> {
        &self.start
    }

    /// Weighted projection of `(x̌, σ̌, ŷ)` with `x̌ = x̂ − (τ1/2)A_iᵀλ̂_iB` and `σ̌ = σ̂ − (τ2/2)λ̂_iB`.
    /// `y_hat` is `[ŷ_i; ŷ_ji …]` stacked.
    pub fn solve(
        &self,
        agent: &AgentSpec,
        x_hat: &[f64],
        sigma_hat: &[f64],
        y_hat: &[f64],
        lambda_ib: &DVector<f64>,
        warm: Option<(&DVector<f64>, &WorkingSet)>,
    ) -> Result<ProjectionOutput, ResolventError> {
        let (n, l) = (self.n, self.l);
        let dim = self.dim();
        let (tau1, tau2) = (self.tau1, self.tau2);
        let at_lam = agent.coupling.tr_mul(lambda_ib);
        let mut target = DVector::zeros(dim);
        for k in 0..n {
            target[k] = x_hat[k] - 0.5 * tau1 * at_lam[k];
        }
        for r in 0..l {
            target[n + r] = sigma_hat[r] - 0.5 * tau2 * lambda_ib[r];
        }
        target.rows_mut(n + l, dim - n - l).copy_from_slice(y_hat);
        let mut p = self.template.clone();
        p.g = -self.weights.component_mul(&target);
        let opts = match warm {
            Some((z, ws)) => QpOptions::default().with_warm_start(z.clone()).with_working_set(ws.clone()),
            None => QpOptions::default().with_warm_start(self.start.clone()),
        };
        let sol = match solve_qp(&p, &opts) {
            Ok(s) => s,
            Err(QpError::Infeasible { violation }) => {
                return Err(ResolventError::InfeasibleLocalProjection { agent: self.agent, violation })
            }
            Err(source) => return Err(ResolventError::Qp { agent: self.agent, source }),
        };
        let z = sol.z;
        Ok(ProjectionOutput {
            x: z.rows(0, n).into_owned(),
            sigma: z.rows(n, l).into_owned(),
            y_own: z.rows(n + l, l).into_owned(),
            y_in: (0..self.n_in).map(|s| z.rows(n + l * (2 + s), l).into_owned()).collect(),
            d2: sol.in_duals.rows(0, l).into_owned(),
            eq_duals: sol.eq_duals.clone(),
            z,
            working_set: sol.working_set,
        })
    }
}

/// One-off `ℬ` projection for agent `i` (builds the kernel each call).
#[allow(clippy::too_many_arguments)]
pub fn resolvent_b_agent(
    instance: &ProblemInstance,
    i: usize,
    x_hat: &[f64],
    sigma_hat: &[f64],
    y_hat: &[f64],
    lambda_ib: &DVector<f64>,
    taus: (f64, f64, f64),
    tau4_in: &[f64],
) -> Result<ProjectionOutput, ResolventError> {
    let k = ProjectionKernel::new(instance, i, taus.0, taus.1, taus.2, tau4_in);
    k.solve(instance.agent(i), x_hat, sigma_hat, y_hat, lambda_ib, None)
}
