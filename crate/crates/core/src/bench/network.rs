use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid network: {0}")]
    Validation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

/// Markets joined by directed roads; every physical road appears once per direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportNetwork {
    pub nodes: usize,
    pub roads: Vec<Road>,
}

/// Road lengths for [`grid_network`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthRule {
    Constant(f64),
    /// Uniform in `[0.2, 1.0]`, seeded.
    Random(u64),
}

impl TransportNetwork {
    pub fn new(nodes: usize, roads: Vec<Road>) -> Result<Self, NetworkError> {
        let net = Self { nodes, roads };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Validation(m));
        if self.nodes < 2 {
            return bad("at least two markets are required".into());
        }
        for (k, r) in self.roads.iter().enumerate() {
            if r.from >= self.nodes || r.to >= self.nodes {
                return bad(format!("road {k} references a market outside 0..{}", self.nodes));
            }
            if r.from == r.to {
                return bad(format!("road {k} is a loop"));
            }
            if !(r.length > 0.0) || !r.length.is_finite() {
                return bad(format!("road {k} has non-positive length {}", r.length));
            }
            if !self.roads.iter().any(|q| q.from == r.to && q.to == r.from) {
                return bad(format!("road {k} ({} -> {}) has no reverse direction", r.from, r.to));
            }
            if self.roads[..k].iter().any(|q| q.from == r.from && q.to == r.to) {
                return bad(format!("road {k} is duplicated"));
            }
        }
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for r in self.roads.iter().filter(|r| r.from == u) {
                if !seen[r.to] {
                    seen[r.to] = true;
                    stack.push(r.to);
                }
            }
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return bad(format!("market {m} is unreachable"));
        }
        Ok(())
    }

    pub fn n_roads(&self) -> usize {
        self.roads.len()
    }

    /// Node-road incidence: `+1` at the destination, `-1` at the origin, so `B_T u` is net inflow.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.nodes, self.roads.len());
        for (k, r) in self.roads.iter().enumerate() {
            b[(r.to, k)] = 1.0;
            b[(r.from, k)] = -1.0;
        }
        b
    }

    /// Length over the maximum length, in `(0, 1]`.
    pub fn normalized_lengths(&self) -> Vec<f64> {
        let max = self.roads.iter().map(|r| r.length).fold(0.0, f64::max);
        self.roads.iter().map(|r| r.length / max).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let net: Self = serde_json::from_str(text).map_err(|e| NetworkError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        net.validate()?;
        Ok(net)
    }
}

fn both_ways(from: usize, to: usize, length: f64) -> [Road; 2] {
    [Road { from, to, length }, Road { from: to, to: from, length }]
}

/// `rows × cols` 4-neighbor grid, market `r·cols + c`.
pub fn grid_network(rows: usize, cols: usize, rule: LengthRule) -> TransportNetwork {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2 x 2 markets");
    let mut rng = match rule {
        LengthRule::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        LengthRule::Constant(_) => None,
    };
    let mut length = || match (&mut rng, rule) {
        (Some(r), _) => r.gen_range(0.2..=1.0),
        (None, LengthRule::Constant(v)) => v,
        _ => unreachable!(),
    };
    let mut roads = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let here = r * cols + c;
            if c + 1 < cols {
                roads.extend(both_ways(here, here + 1, length()));
            }
            if r + 1 < rows {
                roads.extend(both_ways(here, here + cols, length()));
            }
        }
    }
    TransportNetwork { nodes: rows * cols, roads }
}

/// Random points in the unit square joined by a Euclidean spanning tree plus the shortest
/// remaining pairs until `physical_roads` roads exist.
pub fn random_network(nodes: usize, physical_roads: usize, seed: u64) -> TransportNetwork {
    assert!(nodes >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..nodes).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let dist = |a: usize, b: usize| ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();

    // Prim
    let mut in_tree = vec![false; nodes];
    let mut best = vec![(f64::INFINITY, 0usize); nodes];
    in_tree[0] = true;
    for v in 1..nodes {
        best[v] = (dist(0, v), 0);
    }
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for _ in 1..nodes {
        let v = (0..nodes)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0))
            .expect("remaining node");
        in_tree[v] = true;
        chosen.push((best[v].1.min(v), best[v].1.max(v)));
        for u in 0..nodes {
            if !in_tree[u] && dist(v, u) < best[u].0 {
                best[u] = (dist(v, u), v);
            }
        }
    }
    let mut extra: Vec<(usize, usize)> = (0..nodes)
        .flat_map(|a| (a + 1..nodes).map(move |b| (a, b)))
        .filter(|p| !chosen.contains(p))
        .collect();
    extra.sort_by(|p, q| dist(p.0, p.1).total_cmp(&dist(q.0, q.1)));
    let need = physical_roads.saturating_sub(chosen.len());
    chosen.extend(extra.into_iter().take(need));
    chosen.sort_unstable();
    let roads = chosen.into_iter().flat_map(|(a, b)| both_ways(a, b, dist(a, b))).collect();
    TransportNetwork { nodes, roads }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<TransportNetwork, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    TransportNetwork::from_json(&text)
}

pub fn save_network(net: &TransportNetwork, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, net.to_json())
}
