//! JSON form of a problem instance.
//!
//! ```json
//! {
//!   "agents": [{"H": [[2,0],[0,0]], "g": [-2,0], "const": 1, "A": [[1]],
//!               "box": {"lower": [0], "upper": [5]}, "G": [], "h": []}],
//!   "c": [10],
//!   "graph": {"edges": [[0,1],[1,0]], "weights": null}
//! }
//! ```
//!
//! Matrices are row-major nested arrays. A `null` box entry means unbounded.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{build_problem, AgentSpec, CommGraph, LocalFeasibleSet, ModelError, ProblemInstance, QuadraticObjective, WeightRule};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxJson {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentJson {
    #[serde(rename = "H")]
    pub h_mat: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    #[serde(rename = "const", default)]
    pub constant: f64,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "box")]
    pub bounds: BoxJson,
    #[serde(rename = "G", default)]
    pub g_mat: Vec<Vec<f64>>,
    #[serde(default)]
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphJson {
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceJson {
    pub agents: Vec<AgentJson>,
    pub c: Vec<f64>,
    pub graph: GraphJson,
}

fn matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>, ModelError> {
    if let Some(r) = rows.iter().position(|r| r.len() != ncols) {
        return Err(ModelError::DimensionMismatch(format!("{what}: row {r} has {} entries, expected {ncols}", rows[r].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, k| rows[r][k]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl AgentJson {
    pub fn to_spec(&self, idx: usize) -> Result<AgentSpec, ModelError> {
        let n = self.a.first().map_or(self.bounds.lower.len(), Vec::len);
        let a = matrix(&self.a, n, &format!("agent {idx} A"))?;
        let dim = self.g.len();
        let h = matrix(&self.h_mat, dim, &format!("agent {idx} H"))?;
        if h.nrows() != dim {
            return Err(ModelError::DimensionMismatch(format!("agent {idx}: H has {} rows, g has {dim}", h.nrows())));
        }
        let lower = DVector::from_iterator(self.bounds.lower.len(), self.bounds.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
        let upper = DVector::from_iterator(self.bounds.upper.len(), self.bounds.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)));
        let g_mat = matrix(&self.g_mat, n, &format!("agent {idx} G"))?;
        Ok(AgentSpec::new(
            QuadraticObjective::new(h, DVector::from_vec(self.g.clone()), self.constant),
            LocalFeasibleSet::boxed(lower, upper).with_inequalities(g_mat, DVector::from_vec(self.h.clone())),
            a,
        ))
    }

    pub fn from_spec(spec: &AgentSpec) -> Self {
        let fs = &spec.feasible_set;
        Self {
            h_mat: matrix_to_rows(&spec.objective.h),
            g: spec.objective.g.iter().copied().collect(),
            constant: spec.objective.constant,
            a: matrix_to_rows(&spec.coupling),
            bounds: BoxJson {
                lower: fs.lower.iter().map(|&v| finite_or_null(v)).collect(),
                upper: fs.upper.iter().map(|&v| finite_or_null(v)).collect(),
            },
            g_mat: matrix_to_rows(&fs.g),
            h: fs.h.iter().copied().collect(),
        }
    }
}

impl InstanceJson {
    pub fn build(&self) -> Result<ProblemInstance, ModelError> {
        let agents = self.agents.iter().enumerate().map(|(i, a)| a.to_spec(i)).collect::<Result<Vec<_>, _>>()?;
        let rule = match &self.graph.weights {
            Some(w) => WeightRule::Given(w.clone()),
            None => WeightRule::default(),
        };
        let graph = CommGraph::new(self.agents.len(), self.graph.edges.clone(), rule)?;
        build_problem(agents, DVector::from_vec(self.c.clone()), graph)
    }

    pub fn from_instance(instance: &ProblemInstance) -> Self {
        let g = instance.graph();
        Self {
            agents: instance.agents().iter().map(AgentJson::from_spec).collect(),
            c: instance.capacity().iter().copied().collect(),
            graph: GraphJson { edges: g.edges().to_vec(), weights: Some(g.edge_weights().to_vec()) },
        }
    }
}

pub fn parse_instance(text: &str) -> Result<InstanceJson, LoadError> {
    serde_json::from_str(text).map_err(|e| LoadError::Parse(e.to_string()))
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance, LoadError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    Ok(parse_instance(&text)?.build()?)
}

pub fn instance_to_json(instance: &ProblemInstance) -> String {
    serde_json::to_string_pretty(&InstanceJson::from_instance(instance)).expect("instance serializes")
}
