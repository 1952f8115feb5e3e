//! Commodity-distribution benchmark.
//!
//! Branches of one company ship a homogeneous commodity over a transport
//! network. Branch `i` decides road flows `u_i` and factory output `ν_i`; its
//! net supply per market is `A_i x_i = B_T u_i + E_i ν_i`. The unit price falls
//! with the total supply, which couples the branches through the aggregate.

mod network;

pub use network::{grid_network, load_network, random_network, save_network, LengthRule, NetworkError, Road, TransportNetwork};

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{build_problem, AgentSpec, CommGraph, LocalFeasibleSet, ModelError, ProblemInstance, QuadraticObjective, WeightRule};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("objective of branch {branch} is not jointly convex (min eigenvalue {min_eig:.3e})")]
    NonConvexBenchmark { branch: usize, min_eig: f64 },
    #[error("invalid branch {branch}: {reason}")]
    InvalidBranch { branch: usize, reason: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
}

/// One branch: its factory markets and their capacities `b_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub factories: Vec<usize>,
    pub capacities: Vec<f64>,
}

impl BranchSpec {
    /// `E_i`, mapping factory output to markets.
    pub fn indicator(&self, markets: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(markets, self.factories.len());
        for (k, &m) in self.factories.iter().enumerate() {
            e[(m, k)] = 1.0;
        }
        e
    }
}

/// Objective and constraint constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchParams {
    /// Initial unit price, same at every market.
    pub w: f64,
    pub sigma_diag: f64,
    pub sigma_offdiag_scale: f64,
    pub alpha: f64,
    /// Per-market cap `c`.
    pub c_cap: f64,
    pub q_road_scale: f64,
    pub q_prod: f64,
    /// Range for capacities drawn when a branch gives none.
    pub capacity_range: (f64, f64),
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            w: 36.0,
            sigma_diag: 0.23,
            sigma_offdiag_scale: 0.069,
            alpha: 0.21,
            c_cap: 2.0,
            q_road_scale: 7.0,
            q_prod: 2.8,
            capacity_range: (10.0, 14.0),
            seed: 0,
        }
    }
}

/// Price-slope matrix: `sigma_diag` on the diagonal, `scale·(1 − η)` on road pairs.
pub fn price_slope(network: &TransportNetwork, params: &BenchParams) -> DMatrix<f64> {
    let mut s = DMatrix::from_diagonal_element(network.nodes, network.nodes, params.sigma_diag);
    for (r, eta) in network.roads.iter().zip(network.normalized_lengths()) {
        s[(r.from, r.to)] = params.sigma_offdiag_scale * (1.0 - eta);
    }
    s
}

/// Canonical quadratic of `½xᵀQx + α‖Ax + σ‖² − (w − Σ(Ax + σ))ᵀAx` over `[x; σ]`.
pub fn branch_objective(q: &DVector<f64>, a: &DMatrix<f64>, sigma_mat: &DMatrix<f64>, w: &DVector<f64>, alpha: f64) -> QuadraticObjective {
    let n = a.ncols();
    let l = a.nrows();
    let ata = a.transpose() * a;
    let sym = sigma_mat + sigma_mat.transpose();
    let h_xx = DMatrix::from_diagonal(q) + &ata * (2.0 * alpha) + a.transpose() * &sym * a;
    let h_xs = a.transpose() * (DMatrix::identity(l, l) * (2.0 * alpha) + sigma_mat);
    let mut h = DMatrix::zeros(n + l, n + l);
    h.view_mut((0, 0), (n, n)).copy_from(&h_xx);
    h.view_mut((0, n), (n, l)).copy_from(&h_xs);
    h.view_mut((n, 0), (l, n)).copy_from(&h_xs.transpose());
    h.view_mut((n, n), (l, l)).copy_from(&(DMatrix::identity(l, l) * (2.0 * alpha)));
    // exact symmetry for the convexity check
    let h = (&h + h.transpose()) * 0.5;
    let mut g = DVector::zeros(n + l);
    g.rows_mut(0, n).copy_from(&(-a.tr_mul(w)));
    QuadraticObjective::new(h, g, 0.0)
}

/// Directed cycle `0 → 1 → … → 0` plus `⌊N/2⌋` seeded chords (fewer when the graph is nearly complete).
pub fn benchmark_comm_graph(n: usize, seed: u64) -> Result<CommGraph, ModelError> {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.dedup();
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && !edges.contains(&(a, b)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c401);
    candidates.shuffle(&mut rng);
    edges.extend(candidates.into_iter().take(n / 2));
    CommGraph::new(n, edges, WeightRule::default())
}

/// Builds and validates the benchmark instance.
pub fn generate_instance(network: &TransportNetwork, branches: &[BranchSpec], params: &BenchParams) -> Result<ProblemInstance, BenchError> {
    network.validate()?;
    let markets = network.nodes;
    let bt = network.incidence();
    let eta = network.normalized_lengths();
    let sigma_mat = price_slope(network, params);
    let w = DVector::from_element(markets, params.w);
    let e_t = network.n_roads();
    let mut agents = Vec::with_capacity(branches.len());
    for (i, br) in branches.iter().enumerate() {
        if br.factories.is_empty() || br.factories.len() != br.capacities.len() {
            return Err(BenchError::InvalidBranch { branch: i, reason: "one capacity per factory required".into() });
        }
        if let Some(&m) = br.factories.iter().find(|&&m| m >= markets) {
            return Err(BenchError::InvalidBranch { branch: i, reason: format!("factory market {m} out of range") });
        }
        if br.capacities.iter().any(|&b| !(b > 0.0)) {
            return Err(BenchError::InvalidBranch { branch: i, reason: "capacities must be positive".into() });
        }
        let nf = br.factories.len();
        let n = e_t + nf;
        let mut a = DMatrix::zeros(markets, n);
        a.view_mut((0, 0), (markets, e_t)).copy_from(&bt);
        a.view_mut((0, e_t), (markets, nf)).copy_from(&br.indicator(markets));
        let q = DVector::from_iterator(n, eta.iter().map(|e| params.q_road_scale * e).chain(std::iter::repeat_n(params.q_prod, nf)));
        let objective = branch_objective(&q, &a, &sigma_mat, &w, params.alpha);
        let min_eig = SymmetricEigen::new(objective.h.clone()).eigenvalues.min();
        if min_eig < -1e-9 {
            return Err(BenchError::NonConvexBenchmark { branch: i, min_eig });
        }
        let total: f64 = br.capacities.iter().sum();
        let lower = DVector::zeros(n);
        let upper = DVector::from_iterator(n, std::iter::repeat_n(total, e_t).chain(br.capacities.iter().copied()));
        let set = LocalFeasibleSet::boxed(lower, upper).with_inequalities(a.clone(), DVector::zeros(markets));
        agents.push(AgentSpec::new(objective, set, a));
    }
    let graph = benchmark_comm_graph(branches.len(), params.seed)?;
    Ok(build_problem(agents, DVector::from_element(markets, params.c_cap), graph)?)
}

/// Where the transport network comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkSource {
    Path(PathBuf),
    Grid {
        rows: usize,
        cols: usize,
        #[serde(default = "unit_lengths")]
        lengths: LengthRule,
    },
    Random {
        n: usize,
        #[serde(default)]
        roads: Option<usize>,
        seed: u64,
    },
}

fn unit_lengths() -> LengthRule {
    LengthRule::Constant(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub factories: Vec<usize>,
    #[serde(default)]
    pub capacities: Option<Vec<f64>>,
}

/// Benchmark configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub network: NetworkSource,
    pub branches: Vec<BranchConfig>,
    #[serde(default)]
    pub params: BenchParams,
    #[serde(default)]
    pub seed: u64,
}

impl BenchConfig {
    /// Network, branches with capacities filled in, and parameters carrying the config seed.
    pub fn materialize(&self, base: Option<&Path>) -> Result<(TransportNetwork, Vec<BranchSpec>, BenchParams), BenchError> {
        let network = match &self.network {
            NetworkSource::Path(p) => {
                let full = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                load_network(full)?
            }
            NetworkSource::Grid { rows, cols, lengths } => {
                if *rows < 2 || *cols < 2 {
                    return Err(BenchError::Parse("grid needs rows, cols >= 2".into()));
                }
                grid_network(*rows, *cols, *lengths)
            }
            NetworkSource::Random { n, roads, seed } => {
                let roads = roads.unwrap_or((n * 34).div_ceil(29).max(n.saturating_sub(1)));
                random_network(*n, roads, *seed)
            }
        };
        let mut params = self.params.clone();
        params.seed = self.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = params.capacity_range;
        let branches = self
            .branches
            .iter()
            .map(|b| BranchSpec {
                factories: b.factories.clone(),
                capacities: b.capacities.clone().unwrap_or_else(|| b.factories.iter().map(|_| rng.gen_range(lo..=hi)).collect()),
            })
            .collect();
        Ok((network, branches, params))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| BenchError::Parse(e.to_string()))
    }

    /// Loads a config and generates its instance; relative network paths resolve against the config's folder.
    pub fn instance_from_file(path: impl AsRef<Path>) -> Result<(ProblemInstance, TransportNetwork, Vec<BranchSpec>), BenchError> {
        let path = path.as_ref();
        let cfg = Self::load(path)?;
        let (net, branches, params) = cfg.materialize(path.parent())?;
        let inst = generate_instance(&net, &branches, &params)?;
        Ok((inst, net, branches))
    }

    /// 3 × 3 unit grid, branches at markets 0, 4 and 8.
    pub fn desk_default() -> Self {
        Self {
            network: NetworkSource::Grid { rows: 3, cols: 3, lengths: LengthRule::Constant(1.0) },
            branches: [0, 4, 8].iter().map(|&m| BranchConfig { factories: vec![m], capacities: None }).collect(),
            params: BenchParams::default(),
            seed: 1,
        }
    }
}

/// Solved flows and production, per branch, plus per-market totals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Allocation {
    pub branches: Vec<BranchAllocation>,
    /// `Σ_i A_i x_i`: net supply reaching each market.
    pub market_totals: Vec<f64>,
    pub capacity: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchAllocation {
    pub factories: Vec<usize>,
    /// Flow on each directed road, in network order.
    pub flows: Vec<f64>,
    pub production: Vec<f64>,
    /// `A_i x_i`.
    pub net_supply: Vec<f64>,
}

pub fn allocation(instance: &ProblemInstance, network: &TransportNetwork, branches: &[BranchSpec], x: &[DVector<f64>]) -> Allocation {
    let e_t = network.n_roads();
    let out = branches
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (b, xi))| BranchAllocation {
            factories: b.factories.clone(),
            flows: xi.rows(0, e_t).iter().copied().collect(),
            production: xi.rows(e_t, xi.len() - e_t).iter().copied().collect(),
            net_supply: (&instance.agent(i).coupling * xi).iter().copied().collect(),
        })
        .collect();
    Allocation {
        branches: out,
        market_totals: instance.total_coupling(x).iter().copied().collect(),
        capacity: instance.capacity().iter().copied().collect(),
    }
}
