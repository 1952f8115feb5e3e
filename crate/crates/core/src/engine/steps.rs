use nalgebra::DMatrix;

use super::EngineError;
use crate::layout::Layout;
use crate::problem::ProblemInstance;

const TAU_MIN: f64 = 1e-6;
const TAU_MAX: f64 = 1e3;
/// `τ4` rows of `Φ` have no off-diagonal entries, so the Gershgorin rule leaves them free.
pub const TAU4_DEFAULT: f64 = 1.0;

/// Relaxation sequence `γ(k)`.
#[derive(Clone, Debug, PartialEq)]
pub enum GammaSchedule {
    Constant(f64),
    /// Values past the end repeat the last entry.
    Sequence(Vec<f64>),
}

impl GammaSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            GammaSchedule::Constant(g) => *g,
            GammaSchedule::Sequence(v) => v.get(k).or(v.last()).copied().unwrap_or(0.5),
        }
    }
}

/// Per-agent `τ1, τ2, τ4`, per-edge `τ3` and the relaxation schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSizes {
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
    pub tau3: Vec<f64>,
    pub tau4: Vec<f64>,
    pub gamma: GammaSchedule,
}

impl StepSizes {
    pub fn uniform(n_agents: usize, n_edges: usize, tau: f64) -> Self {
        Self {
            tau1: vec![tau; n_agents],
            tau2: vec![tau; n_agents],
            tau3: vec![tau; n_edges],
            tau4: vec![tau; n_agents],
            gamma: GammaSchedule::Constant(0.5),
        }
    }

    pub fn with_gamma(mut self, gamma: GammaSchedule) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_tau4(mut self, tau4: f64) -> Self {
        self.tau4.iter_mut().for_each(|t| *t = tau4);
        self
    }
}

fn from_row_sum(safety: f64, off: f64) -> f64 {
    if off <= 0.0 {
        TAU_MAX
    } else {
        (safety / off).clamp(TAU_MIN, TAU_MAX)
    }
}

/// Gershgorin rule: each `τ⁻¹` is its row's absolute off-diagonal sum in `Φ` divided by `safety`.
pub fn choose_step_sizes(instance: &ProblemInstance, safety: f64) -> StepSizes {
    let graph = instance.graph();
    let n = instance.n_agents();
    let mut tau1 = Vec::with_capacity(n);
    let mut tau2 = Vec::with_capacity(n);
    for i in 0..n {
        let a = &instance.agent(i).coupling;
        let deg = graph.incident_edges(i).len() as f64;
        let col_max = (0..a.ncols()).map(|k| a.column(k).abs().sum()).fold(0.0, f64::max);
        tau1.push(from_row_sum(safety, 0.5 * deg * col_max));
        tau2.push(from_row_sum(safety, 0.5 * deg));
    }
    let tau3 = graph
        .edges()
        .iter()
        .map(|&(tail, head)| {
            let at = &instance.agent(tail).coupling;
            let ah = &instance.agent(head).coupling;
            let worst = (0..instance.l())
                .map(|r| 0.5 * (at.row(r).abs().sum() + ah.row(r).abs().sum() + 2.0))
                .fold(0.0, f64::max);
            from_row_sum(safety, worst)
        })
        .collect();
    StepSizes { tau1, tau2, tau3, tau4: vec![TAU4_DEFAULT; n], gamma: GammaSchedule::Constant(0.5) }
}

/// Dense `Φ`; fails when it is not positive definite.
pub fn build_design_matrix(instance: &ProblemInstance, steps: &StepSizes) -> Result<DMatrix<f64>, EngineError> {
    let lay = Layout::new(instance);
    let graph = instance.graph();
    let l = lay.l();
    let mut phi = DMatrix::zeros(lay.dim(), lay.dim());
    for i in 0..instance.n_agents() {
        for k in lay.x(i) {
            phi[(k, k)] = 1.0 / steps.tau1[i];
        }
        for k in lay.sigma(i) {
            phi[(k, k)] = 1.0 / steps.tau2[i];
        }
        for k in lay.omega(i) {
            phi[(k, k)] = 1.0 / steps.tau4[i];
        }
    }
    for e in 0..graph.n_edges() {
        for k in lay.lambda(e) {
            phi[(k, k)] = 1.0 / steps.tau3[e];
        }
        let (tail, head) = graph.edge(e);
        for (agent, sign) in [(head, 1.0), (tail, -1.0)] {
            let a = &instance.agent(agent).coupling;
            let xs = lay.x(agent);
            let ss = lay.sigma(agent);
            for r in 0..l {
                let lam = lay.lambda(e).start + r;
                for (c, k) in xs.clone().enumerate() {
                    let v = -0.5 * sign * a[(r, c)];
                    phi[(k, lam)] = v;
                    phi[(lam, k)] = v;
                }
                phi[(ss.start + r, lam)] = -0.5 * sign;
                phi[(lam, ss.start + r)] = -0.5 * sign;
            }
        }
    }
    if phi.clone().cholesky().is_none() {
        return Err(EngineError::NotPositiveDefinite);
    }
    Ok(phi)
}
