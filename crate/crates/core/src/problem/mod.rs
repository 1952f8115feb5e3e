//! Multi-agent problem model.
//!
//! Each agent `i` owns a decision `x_i` in a polyhedral set and a convex
//! quadratic objective over the joint vector `z_i = [x_i; σ_i]`, where `σ_i`
//! stands for the aggregate `Σ_{j≠i} A_j x_j` of everyone else. The agents share
//! the resource constraint `Σ_i A_i x_i <= c` and talk over a directed
//! communication graph.

mod graph;
pub mod io;

pub use graph::{build_weight_matrix, CommGraph, WeightRule};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpOptions, QpProblem};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective of agent {agent} is not convex: {reason}")]
    NonConvexObjective { agent: usize, reason: String },
    #[error("local feasible set of agent {agent} is empty")]
    InfeasibleLocalSet { agent: usize },
    #[error("coupled constraints admit no strictly feasible point (best slack {slack:.3e})")]
    SlaterViolation { slack: f64 },
    #[error("DisconnectedGraph: {0}")]
    DisconnectedGraph(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("edge {edge} has non-negative weight {value}")]
    NonNegativeWeight { edge: usize, value: f64 },
    #[error("auxiliary solve failed: {0}")]
    Solver(#[from] QpError),
}

/// `J(z) = 1/2 z'Hz + g'z + constant` over `z = [x; σ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub constant: f64,
}

impl QuadraticObjective {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, constant: f64) -> Self {
        Self { h, g, constant }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + self.constant
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.h * z + &self.g
    }

    /// Checks symmetry (1e-12 relative) and positive semidefiniteness (λ_min >= -1e-9·‖H‖).
    pub fn check_convex(&self) -> Result<(), String> {
        let n = self.h.nrows();
        let norm = self.h.amax().max(1e-300);
        for i in 0..n {
            for j in 0..i {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > 1e-12 * norm {
                    return Err(format!("H is not symmetric at ({i}, {j})"));
                }
            }
        }
        if n == 0 {
            return Ok(());
        }
        let eig = SymmetricEigen::new(self.h.clone()).eigenvalues;
        let min = eig.min();
        let spec = eig.amax();
        if min < -1e-9 * spec {
            return Err(format!("minimum eigenvalue {min:.3e}"));
        }
        Ok(())
    }
}

/// Box plus linear inequalities: `lower <= x <= upper`, `G x >= h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeasibleSet {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl LocalFeasibleSet {
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let n = lower.len();
        Self { lower, upper, g: DMatrix::zeros(0, n), h: DVector::zeros(0) }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::boxed(DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY))
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h = h;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for k in 0..x.len() {
            v = v.max(self.lower[k] - x[k]).max(x[k] - self.upper[k]);
        }
        if self.g.nrows() > 0 {
            let r = &self.h - &self.g * x;
            v = r.iter().fold(v, |a, &b| a.max(b));
        }
        v
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        let n = self.dim();
        if self.g.nrows() == 0 {
            return Ok(DVector::from_iterator(n, (0..n).map(|k| x[k].clamp(self.lower[k], self.upper[k]))));
        }
        let p = QpProblem::new(DMatrix::identity(n, n), -x)
            .with_inequalities(-&self.g, -&self.h)
            .with_bounds(self.lower.clone(), self.upper.clone());
        Ok(solve_qp(&p, &QpOptions::default().with_warm_start(x.clone()))?.z)
    }
}

/// One agent: objective over `[x_i; σ_i]`, local set over `x_i`, coupling matrix `A_i` (l × n_i).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub objective: QuadraticObjective,
    pub feasible_set: LocalFeasibleSet,
    pub coupling: DMatrix<f64>,
}

impl AgentSpec {
    pub fn new(objective: QuadraticObjective, feasible_set: LocalFeasibleSet, coupling: DMatrix<f64>) -> Self {
        Self { objective, feasible_set, coupling }
    }

    pub fn n(&self) -> usize {
        self.coupling.ncols()
    }

    pub fn l(&self) -> usize {
        self.coupling.nrows()
    }

    /// Stacks `[x; σ]`.
    pub fn joint(&self, x: &DVector<f64>, sigma: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(x.len() + sigma.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), sigma.len()).copy_from(sigma);
        z
    }
}

/// Validated problem instance. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    agents: Vec<AgentSpec>,
    capacity: DVector<f64>,
    graph: CommGraph,
    anchors: Vec<DVector<f64>>,
}

/// Validates dimensions, convexity, local feasibility, graph structure and Slater's condition.
pub fn build_problem(agents: Vec<AgentSpec>, capacity: DVector<f64>, graph: CommGraph) -> Result<ProblemInstance, ModelError> {
    if agents.len() != graph.n_agents() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} agents but the graph has {} nodes",
            agents.len(),
            graph.n_agents()
        )));
    }
    let l = capacity.len();
    for (i, a) in agents.iter().enumerate() {
        let n = a.n();
        let dm = |what: String| Err(ModelError::DimensionMismatch(format!("agent {i}: {what}")));
        if a.l() != l {
            return dm(format!("A_i has {} rows, capacity has {l}", a.l()));
        }
        if a.objective.dim() != n + l || a.objective.h.nrows() != n + l || a.objective.h.ncols() != n + l {
            return dm(format!("objective must be over {} = n_i + l variables", n + l));
        }
        let fs = &a.feasible_set;
        if fs.lower.len() != n || fs.upper.len() != n || fs.g.ncols() != n || fs.g.nrows() != fs.h.len() {
            return dm("local feasible set shape".into());
        }
        if (0..n).any(|k| fs.lower[k] > fs.upper[k]) {
            return Err(ModelError::InfeasibleLocalSet { agent: i });
        }
        a.objective.check_convex().map_err(|reason| ModelError::NonConvexObjective { agent: i, reason })?;
    }

    let mut anchors = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        let n = a.n();
        let fs = &a.feasible_set;
        let p = QpProblem::new(DMatrix::identity(n, n), DVector::zeros(n))
            .with_inequalities(-&fs.g, -&fs.h)
            .with_bounds(fs.lower.clone(), fs.upper.clone());
        match solve_qp(&p, &QpOptions::default()) {
            Ok(sol) => anchors.push(sol.z),
            Err(QpError::Infeasible { .. }) => return Err(ModelError::InfeasibleLocalSet { agent: i }),
            Err(e) => return Err(e.into()),
        }
    }

    let slack = slater_slack(&agents, &capacity)?;
    if !(slack < -1e-9) {
        return Err(ModelError::SlaterViolation { slack });
    }
    Ok(ProblemInstance { agents, capacity, graph, anchors })
}

/// Best achievable `max_r (Σ A_i x_i - c)_r` over the local sets (negative when Slater holds).
pub fn slater_slack(agents: &[AgentSpec], capacity: &DVector<f64>) -> Result<f64, ModelError> {
    let l = capacity.len();
    if l == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let total: usize = agents.iter().map(AgentSpec::n).sum();
    let dim = total + 1;
    let delta = 1e-8;
    let mut h = DMatrix::zeros(dim, dim);
    for k in 0..total {
        h[(k, k)] = delta;
    }
    h[(total, total)] = 1.0;
    let mut g = DVector::zeros(dim);
    g[total] = 1.0;
    let local_rows: usize = agents.iter().map(|a| a.feasible_set.g.nrows()).sum();
    let mut a_in = DMatrix::zeros(l + local_rows, dim);
    let mut b_in = DVector::zeros(l + local_rows);
    let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(dim, f64::INFINITY);
    let mut col = 0;
    let mut row = l;
    for a in agents {
        let n = a.n();
        a_in.view_mut((0, col), (l, n)).copy_from(&a.coupling);
        let fs = &a.feasible_set;
        let m = fs.g.nrows();
        a_in.view_mut((row, col), (m, n)).copy_from(&(-&fs.g));
        b_in.rows_mut(row, m).copy_from(&(-&fs.h));
        lower.rows_mut(col, n).copy_from(&fs.lower);
        upper.rows_mut(col, n).copy_from(&fs.upper);
        col += n;
        row += m;
    }
    for r in 0..l {
        a_in[(r, total)] = -1.0;
        b_in[r] = capacity[r];
    }
    let p = QpProblem::new(h, g).with_inequalities(a_in, b_in).with_bounds(lower, upper);
    let sol = match solve_qp(&p, &QpOptions::default()) {
        Ok(s) => s,
        Err(QpError::MaxIter(s)) => *s,
        Err(e) => return Err(e.into()),
    };
    let mut sum = DVector::zeros(l);
    let mut col = 0;
    for a in agents {
        sum += &a.coupling * sol.z.rows(col, a.n());
        col += a.n();
    }
    Ok((sum - capacity).max())
}

impl ProblemInstance {
    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentSpec {
        &self.agents[i]
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Number of shared resources `l`.
    pub fn l(&self) -> usize {
        self.capacity.len()
    }

    pub fn capacity(&self) -> &DVector<f64> {
        &self.capacity
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    /// A point of each local feasible set, found during validation.
    pub fn anchor(&self, i: usize) -> &DVector<f64> {
        &self.anchors[i]
    }

    pub fn total_dim(&self) -> usize {
        self.agents.iter().map(AgentSpec::n).sum()
    }

    /// Offsets of each agent's block in the stacked decision vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.agents.len());
        let mut acc = 0;
        for a in &self.agents {
            off.push(acc);
            acc += a.n();
        }
        off
    }

    /// Splits a stacked decision vector into per-agent blocks.
    pub fn split(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.offsets().iter().zip(&self.agents).map(|(&o, a)| x.rows(o, a.n()).into_owned()).collect()
    }

    pub fn stack(&self, blocks: &[DVector<f64>]) -> DVector<f64> {
        let mut x = DVector::zeros(self.total_dim());
        for (o, b) in self.offsets().into_iter().zip(blocks) {
            x.rows_mut(o, b.len()).copy_from(b);
        }
        x
    }

    /// `Σ_i A_i x_i`, ascending agent order.
    pub fn total_coupling(&self, x_all: &[DVector<f64>]) -> DVector<f64> {
        let mut s = DVector::zeros(self.l());
        for (a, x) in self.agents.iter().zip(x_all) {
            s += &a.coupling * x;
        }
        s
    }
}

/// `Σ_{j≠i} A_j x_j`, summed in ascending agent order.
pub fn aggregate(instance: &ProblemInstance, x_all: &[DVector<f64>], i: usize) -> DVector<f64> {
    let mut s = DVector::zeros(instance.l());
    for (j, (a, x)) in instance.agents().iter().zip(x_all).enumerate() {
        if j != i {
            s += &a.coupling * x;
        }
    }
    s
}

/// `J(x) = Σ_i J_i(x_i, Σ_{j≠i} A_j x_j)`.
pub fn eval_objective(instance: &ProblemInstance, x_all: &[DVector<f64>]) -> f64 {
    instance
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| a.objective.value(&a.joint(&x_all[i], &aggregate(instance, x_all, i))))
        .sum()
}

/// The scalar two-agent instance `J_i = (x_i - 1)^2`, `x_i ∈ [0, 5]`, `x_1 + x_2 <= c`,
/// over the bidirectional 2-cycle.
pub fn two_agent_instance(c: f64) -> Result<ProblemInstance, ModelError> {
    let agent = || {
        // (x - 1)^2 = 1/2 * 2 x^2 - 2x + 1 over z = [x; σ]
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let g = DVector::from_vec(vec![-2.0, 0.0]);
        AgentSpec::new(
            QuadraticObjective::new(h, g, 1.0),
            LocalFeasibleSet::boxed(DVector::from_element(1, 0.0), DVector::from_element(1, 5.0)),
            DMatrix::from_element(1, 1, 1.0),
        )
    };
    let graph = CommGraph::new(2, vec![(0, 1), (1, 0)], WeightRule::default())?;
    build_problem(vec![agent(), agent()], DVector::from_element(1, c), graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn two_agent_instance_is_valid() {
        let inst = two_agent_instance(10.0).unwrap();
        assert_eq!(inst.n_agents(), 2);
        assert_eq!(inst.l(), 1);
    }

    #[test]
    fn empty_graph_is_disconnected() {
        assert!(matches!(
            CommGraph::new(2, vec![], WeightRule::default()),
            Err(ModelError::DisconnectedGraph(_))
        ));
    }

    #[test]
    fn negative_capacity_violates_slater() {
        assert!(matches!(two_agent_instance(-1.0), Err(ModelError::SlaterViolation { .. })));
    }

    #[test]
    fn zero_capacity_is_not_strict() {
        assert!(matches!(two_agent_instance(0.0), Err(ModelError::SlaterViolation { .. })));
    }

    #[test]
    fn aggregate_two_agents() {
        let inst = two_agent_instance(10.0).unwrap();
        let x = vec![v(&[1.0]), v(&[3.0])];
        assert_eq!(aggregate(&inst, &x, 0), v(&[3.0]));
        let zero = vec![v(&[0.0]), v(&[0.0])];
        assert_eq!(aggregate(&inst, &zero, 1), v(&[0.0]));
    }

    #[test]
    fn objective_values() {
        let inst = two_agent_instance(10.0).unwrap();
        assert_eq!(eval_objective(&inst, &[v(&[1.0]), v(&[1.0])]), 0.0);
        assert_eq!(eval_objective(&inst, &[v(&[0.0]), v(&[0.0])]), 2.0);
    }

    #[test]
    fn nonconvex_objective_rejected() {
        let inst = two_agent_instance(10.0).unwrap();
        let mut agents = inst.agents().to_vec();
        agents[1].objective.h[(1, 1)] = -1e-3;
        let err = build_problem(agents, inst.capacity().clone(), inst.graph().clone()).unwrap_err();
        assert!(matches!(err, ModelError::NonConvexObjective { agent: 1, .. }));
    }

    #[test]
    fn empty_local_set_rejected() {
        let inst = two_agent_instance(10.0).unwrap();
        let mut agents = inst.agents().to_vec();
        // x >= 6 with x <= 5
        agents[0].feasible_set = agents[0].feasible_set.clone().with_inequalities(DMatrix::from_element(1, 1, 1.0), v(&[6.0]));
        let err = build_problem(agents, inst.capacity().clone(), inst.graph().clone()).unwrap_err();
        assert!(matches!(err, ModelError::InfeasibleLocalSet { agent: 0 }));
    }

    #[test]
    fn mismatched_coupling_rows_rejected() {
        let inst = two_agent_instance(10.0).unwrap();
        let err = build_problem(inst.agents().to_vec(), v(&[1.0, 1.0]), inst.graph().clone()).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch(_)));
    }

    #[test]
    fn projection_onto_polyhedron() {
        let set = LocalFeasibleSet::boxed(v(&[0.0, 0.0]), v(&[2.0, 2.0]))
            .with_inequalities(DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]), v(&[-1.0]));
        let p = set.project(&v(&[2.0, 2.0])).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }
}
