use std::collections::{HashSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};

use super::ModelError;

/// How the negative off-diagonal entries of the weight matrix are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightRule {
    /// Every edge gets weight `-w` (`w > 0`).
    Uniform(f64),
    /// One (negative) weight per edge, in edge order.
    Given(Vec<f64>),
}

impl Default for WeightRule {
    fn default() -> Self {
        WeightRule::Uniform(1.0)
    }
}

/// Directed communication graph with its weight and incidence matrices.
///
/// Edges are `(tail, head)` pairs. Incidence columns carry `+1` at the head and
/// `-1` at the tail, so `(B ⊗ I) λ` at agent `i` is the sum of in-edge duals
/// minus the sum of out-edge duals.
#[derive(Clone, Debug)]
pub struct CommGraph {
    n_agents: usize,
    edges: Vec<(usize, usize)>,
    edge_weights: Vec<f64>,
    weights: DMatrix<f64>,
    incidence: DMatrix<f64>,
    in_edges: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
    incident: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn new(n_agents: usize, edges: Vec<(usize, usize)>, rule: WeightRule) -> Result<Self, ModelError> {
        check_edges(n_agents, &edges)?;
        check_connected(n_agents, &edges)?;
        let edge_weights = edge_weights(&edges, &rule)?;
        let weights = build_weight_matrix(n_agents, &edges, &rule)?;
        check_simple_null_space(&weights)?;

        let e = edges.len();
        let mut incidence = DMatrix::zeros(n_agents, e);
        let mut in_edges = vec![Vec::new(); n_agents];
        let mut out_edges = vec![Vec::new(); n_agents];
        let mut incident = vec![Vec::new(); n_agents];
        for (k, &(tail, head)) in edges.iter().enumerate() {
            incidence[(head, k)] = 1.0;
            incidence[(tail, k)] = -1.0;
            in_edges[head].push(k);
            out_edges[tail].push(k);
            incident[head].push(k);
            incident[tail].push(k);
        }
        for list in &mut in_edges {
            list.sort_by_key(|&k| edges[k].0);
        }
        for list in &mut out_edges {
            list.sort_by_key(|&k| edges[k].1);
        }
        for list in &mut incident {
            list.sort_unstable();
        }
        Ok(Self { n_agents, edges, edge_weights, weights, incidence, in_edges, out_edges, incident })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        self.edges[e]
    }

    /// `W_ji` of each edge `(j, i)`, in edge order.
    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    pub fn weight_matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Edges `(j, i)` entering `i`, ordered by ascending tail `j`.
    pub fn in_edges(&self, i: usize) -> &[usize] {
        &self.in_edges[i]
    }

    /// Edges `(i, j)` leaving `i`, ordered by ascending head `j`.
    pub fn out_edges(&self, i: usize) -> &[usize] {
        &self.out_edges[i]
    }

    /// All edges touching `i`, in ascending edge index.
    pub fn incident_edges(&self, i: usize) -> &[usize] {
        &self.incident[i]
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.in_edges[i].len()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out_edges[i].len()
    }

    /// Position of edge `e` within its tail's out-edge list.
    pub fn out_slot(&self, e: usize) -> usize {
        let tail = self.edges[e].0;
        self.out_edges[tail].iter().position(|&k| k == e).expect("edge belongs to its tail")
    }

    /// `+1` when `i` is the head of `e`, `-1` when it is the tail.
    pub fn orientation(&self, i: usize, e: usize) -> f64 {
        let (tail, head) = self.edges[e];
        if head == i {
            1.0
        } else if tail == i {
            -1.0
        } else {
            0.0
        }
    }
}

fn check_edges(n: usize, edges: &[(usize, usize)]) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for &(t, h) in edges {
        if t >= n || h >= n {
            return Err(ModelError::InvalidGraph(format!("edge ({t}, {h}) references an agent outside 0..{n}")));
        }
        if t == h {
            return Err(ModelError::InvalidGraph(format!("self-loop at agent {t}")));
        }
        if !seen.insert((t, h)) {
            return Err(ModelError::InvalidGraph(format!("duplicate edge ({t}, {h})")));
        }
    }
    Ok(())
}

fn check_connected(n: usize, edges: &[(usize, usize)]) -> Result<(), ModelError> {
    if n < 2 {
        return Err(ModelError::DisconnectedGraph("at least two agents are required".into()));
    }
    let mut adj = vec![Vec::new(); n];
    let mut has_out = vec![false; n];
    for &(t, h) in edges {
        adj[t].push(h);
        adj[h].push(t);
        has_out[t] = true;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(ModelError::DisconnectedGraph(format!("agent {i} is unreachable from agent 0")));
    }
    if let Some(i) = has_out.iter().position(|s| !s) {
        return Err(ModelError::DisconnectedGraph(format!("agent {i} has no out-neighbor")));
    }
    Ok(())
}

fn edge_weights(edges: &[(usize, usize)], rule: &WeightRule) -> Result<Vec<f64>, ModelError> {
    match rule {
        WeightRule::Uniform(w) => {
            if !(*w > 0.0) {
                return Err(ModelError::NonNegativeWeight { edge: 0, value: -w });
            }
            Ok(vec![-w; edges.len()])
        }
        WeightRule::Given(values) => {
            if values.len() != edges.len() {
                return Err(ModelError::DimensionMismatch(format!(
                    "{} weights for {} edges",
                    values.len(),
                    edges.len()
                )));
            }
            if let Some(e) = values.iter().position(|v| !(*v < 0.0)) {
                return Err(ModelError::NonNegativeWeight { edge: e, value: values[e] });
            }
            Ok(values.clone())
        }
    }
}

/// Weight matrix with `W_ji < 0` on edges `(j, i)` and `W_ii = -Σ_j W_ij`, so `W·1 = 0`.
pub fn build_weight_matrix(n: usize, edges: &[(usize, usize)], rule: &WeightRule) -> Result<DMatrix<f64>, ModelError> {
    check_edges(n, edges)?;
    check_connected(n, edges)?;
    let values = edge_weights(edges, rule)?;
    let mut w = DMatrix::zeros(n, n);
    for (&(t, h), &v) in edges.iter().zip(&values) {
        w[(t, h)] = v;
    }
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += w[(i, j)];
            }
        }
        w[(i, i)] = -s;
    }
    Ok(w)
}

fn check_simple_null_space(w: &DMatrix<f64>) -> Result<(), ModelError> {
    // squared singular values
    let mut s: Vec<f64> = SymmetricEigen::new(w.transpose() * w).eigenvalues.iter().copied().collect();
    s.sort_by(|a, b| a.total_cmp(b));
    let top = s.last().copied().unwrap_or(0.0).max(1e-300);
    if s.len() >= 2 && s[1] / top <= 1e-12 {
        return Err(ModelError::DisconnectedGraph(
            "weight matrix has a repeated zero eigenvalue (more than one closed component)".into(),
        ));
    }
    Ok(())
}
