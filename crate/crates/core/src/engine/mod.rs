//! Douglas-Rachford iteration over the stacked iterate.
//!
//! One step evaluates the `𝒜` resolvent (ACU, agent prox solves, edge λ
//! updates), reflects, evaluates the `ℬ` resolvent (agent projections, edge λ̄
//! updates) and applies the Krasnoselskij-Mann averaging.

mod metrics;
mod steps;

pub use metrics::{compute_metrics, write_trace_csv, TraceRecord, TRACE_HEADER};
pub use steps::{build_design_matrix, choose_step_sizes, GammaSchedule, StepSizes, TAU4_DEFAULT};

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use crate::layout::Layout;
use crate::oracle::kkt_check;
use crate::problem::ProblemInstance;
use crate::qp::WorkingSet;
use crate::resolvents::{
    acu, coupled_sum, incidence_sum, km_update, reflect, resolvent_a_edge, resolvent_b_edge, AgentKernel,
    ProjectionKernel, ProjectionOutput, ResolventError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("design matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("prox system of agent {agent} is singular")]
    SingularSystem { agent: usize },
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no convergence after {} iterations (residual {:.3e})", .0.solution.iterations, .0.solution.residual)]
    MaxIterExceeded(Box<RunOutput>),
}

/// `ψ̃`, `ψ`, `ψ̂`, `ψ̄` plus the per-agent data carried between steps.
#[derive(Clone, Debug)]
pub struct IterateState {
    pub tilde: DVector<f64>,
    pub psi: DVector<f64>,
    pub hat: DVector<f64>,
    pub bar: DVector<f64>,
    /// Duals of `A_i x_i + σ_i <= c` from the last projection.
    pub d2: Vec<DVector<f64>>,
    /// Last projection primal and working set per agent, used as the next warm start.
    pub warm: Vec<Option<(DVector<f64>, WorkingSet)>>,
}

impl IterateState {
    pub fn zeros(layout: &Layout) -> Self {
        Self::from_tilde(layout, DVector::zeros(layout.dim()))
    }

    pub fn from_tilde(layout: &Layout, tilde: DVector<f64>) -> Self {
        let d = layout.dim();
        Self {
            psi: tilde.clone(),
            tilde,
            hat: DVector::zeros(d),
            bar: DVector::zeros(d),
            d2: vec![DVector::zeros(layout.l()); layout.n_agents()],
            warm: vec![None; layout.n_agents()],
        }
    }
}

/// Everything that stays fixed across iterations: layout, step sizes, factorizations.
pub struct Engine<'a> {
    instance: &'a ProblemInstance,
    layout: Layout,
    steps: StepSizes,
    prox: Vec<AgentKernel>,
    projection: Vec<ProjectionKernel>,
    pool: Option<rayon::ThreadPool>,
}

/// Worker count from `AGGSPLIT_THREADS` (unset or 0 means sequential).
pub fn threads_from_env() -> usize {
    std::env::var("AGGSPLIT_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

impl<'a> Engine<'a> {
    pub fn new(instance: &'a ProblemInstance, steps: StepSizes) -> Result<Self, EngineError> {
        Self::with_threads(instance, steps, 0)
    }

    pub fn with_threads(instance: &'a ProblemInstance, steps: StepSizes, threads: usize) -> Result<Self, EngineError> {
        let n = instance.n_agents();
        let e = instance.graph().n_edges();
        if steps.tau1.len() != n || steps.tau2.len() != n || steps.tau4.len() != n || steps.tau3.len() != e {
            return Err(EngineError::DimensionMismatch("step sizes do not match the instance".into()));
        }
        let layout = Layout::new(instance);
        let graph = instance.graph();
        let mut prox = Vec::with_capacity(n);
        let mut projection = Vec::with_capacity(n);
        for i in 0..n {
            prox.push(
                AgentKernel::new(instance.agent(i), steps.tau1[i], steps.tau2[i])
                    .ok_or(EngineError::SingularSystem { agent: i })?,
            );
            let tau4_in: Vec<f64> = graph.in_edges(i).iter().map(|&k| steps.tau4[graph.edge(k).0]).collect();
            projection.push(ProjectionKernel::new(instance, i, steps.tau1[i], steps.tau2[i], steps.tau4[i], &tau4_in));
        }
        let pool = (threads > 0).then(|| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
        });
        Ok(Self { instance, layout, steps, prox, projection, pool })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn steps(&self) -> &StepSizes {
        &self.steps
    }

    pub fn instance(&self) -> &ProblemInstance {
        self.instance
    }

    pub fn prox_kernel(&self, i: usize) -> &AgentKernel {
        &self.prox[i]
    }

    pub fn projection_kernel(&self, i: usize) -> &ProjectionKernel {
        &self.projection[i]
    }

    fn per_agent<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        let n = self.instance.n_agents();
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }

    /// `λ_iB` from a stacked vector, over incident edges in ascending index.
    pub fn lambda_ib(&self, v: &[f64], i: usize) -> DVector<f64> {
        let g = self.instance.graph();
        incidence_sum(self.layout.l(), g.incident_edges(i).iter().map(|&e| (g.orientation(i, e), &v[self.layout.lambda(e)])))
    }

    fn sums(&self, v: &[f64]) -> Vec<DVector<f64>> {
        (0..self.instance.n_agents())
            .map(|i| coupled_sum(&self.instance.agent(i).coupling, &v[self.layout.x(i)], &v[self.layout.sigma(i)]))
            .collect()
    }

    /// `ψ = J_{Φ⁻¹𝒜}(ψ̃)`, written into `state.psi`.
    pub fn resolvent_a(&self, state: &mut IterateState) {
        let lay = &self.layout;
        let graph = self.instance.graph();
        let tilde = state.tilde.as_slice();
        let psi = state.psi.as_mut_slice();
        acu(lay, graph, &self.steps.tau4, tilde, psi);
        let solved = self.per_agent(|i| {
            let lam = self.lambda_ib(tilde, i);
            self.prox[i].solve(&tilde[lay.x(i)], &tilde[lay.sigma(i)], &lam)
        });
        for (i, (x, s)) in solved.into_iter().enumerate() {
            psi[lay.x(i)].copy_from_slice(x.as_slice());
            psi[lay.sigma(i)].copy_from_slice(s.as_slice());
        }
        // edge duals need the reflected agent sums
        let mut xs_hat = vec![0.0; lay.lambda_all().start];
        reflect(&psi[..xs_hat.len()], &tilde[..xs_hat.len()], &mut xs_hat);
        let hat_sums = self.sums(&xs_hat);
        for e in 0..graph.n_edges() {
            let (tail, head) = graph.edge(e);
            let lam = resolvent_a_edge(&tilde[lay.lambda(e)], self.steps.tau3[e], hat_sums[tail].as_slice(), hat_sums[head].as_slice());
            psi[lay.lambda(e)].copy_from_slice(lam.as_slice());
        }
    }

    /// `ψ̄ = J_{Φ⁻¹ℬ}(ψ̂)` from `state.hat`, written into `state.bar`.
    pub fn resolvent_b(&self, state: &mut IterateState) -> Result<(), EngineError> {
        let lay = &self.layout;
        let graph = self.instance.graph();
        let hat = state.hat.as_slice();
        let warm = &state.warm;
        let outs: Vec<Result<ProjectionOutput, ResolventError>> = self.per_agent(|i| {
            let lam = self.lambda_ib(hat, i);
            let y_hat = self.stacked_estimates(hat, i);
            self.projection[i].solve(
                self.instance.agent(i),
                &hat[lay.x(i)],
                &hat[lay.sigma(i)],
                &y_hat,
                &lam,
                warm[i].as_ref().map(|(z, ws)| (z, ws)),
            )
        });
        let bar = state.bar.as_mut_slice();
        for (i, out) in outs.into_iter().enumerate() {
            let out = out?;
            bar[lay.x(i)].copy_from_slice(out.x.as_slice());
            bar[lay.sigma(i)].copy_from_slice(out.sigma.as_slice());
            bar[lay.y(i)].copy_from_slice(out.y_own.as_slice());
            for (s, &e) in graph.in_edges(i).iter().enumerate() {
                bar[lay.y_est(e)].copy_from_slice(out.y_in[s].as_slice());
            }
            state.d2[i] = out.d2;
            state.warm[i] = Some((out.z, out.working_set));
        }
        for e in 0..graph.n_edges() {
            bar[lay.mu(e)].copy_from_slice(&hat[lay.mu(e)]);
        }
        let hat_sums = self.sums(hat);
        let bar_sums = self.sums(bar);
        for e in 0..graph.n_edges() {
            let (tail, head) = graph.edge(e);
            let lam = resolvent_b_edge(
                &hat[lay.lambda(e)],
                self.steps.tau3[e],
                bar_sums[tail].as_slice(),
                bar_sums[head].as_slice(),
                hat_sums[tail].as_slice(),
                hat_sums[head].as_slice(),
            );
            bar[lay.lambda(e)].copy_from_slice(lam.as_slice());
        }
        Ok(())
    }

    /// `[y_i; y_ji …]` of agent `i` read from a stacked vector, in-neighbors by ascending tail.
    pub fn stacked_estimates(&self, v: &[f64], i: usize) -> Vec<f64> {
        let lay = &self.layout;
        let mut out = v[lay.y(i)].to_vec();
        for &e in self.instance.graph().in_edges(i) {
            out.extend_from_slice(&v[lay.y_est(e)]);
        }
        out
    }

    /// One full iteration; returns `‖ψ̄ − ψ‖`.
    pub fn dr_step(&self, state: &mut IterateState, k: usize) -> Result<f64, EngineError> {
        self.resolvent_a(state);
        reflect(state.psi.as_slice(), state.tilde.as_slice(), state.hat.as_mut_slice());
        self.resolvent_b(state)?;
        let gamma = self.steps.gamma.at(k);
        km_update(state.tilde.as_mut_slice(), state.psi.as_slice(), state.bar.as_slice(), gamma);
        Ok((&state.bar - &state.psi).norm())
    }
}

/// Options of [`run`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub gamma: f64,
    pub safety: f64,
    pub step_sizes: Option<StepSizes>,
    /// Initial `ψ̃`; zeros when absent.
    pub init: Option<DVector<f64>>,
    /// Reference minimizer for metric (f), stacked.
    pub x_star: Option<DVector<f64>>,
    pub wall_clock: bool,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-8,
            gamma: 0.5,
            safety: 0.5,
            step_sizes: None,
            init: None,
            x_star: None,
            wall_clock: true,
            threads: 0,
        }
    }
}

/// Final iterate and derived quantities.
#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<DVector<f64>>,
    pub sigma: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub omega: DVector<f64>,
    pub state: IterateState,
    pub converged: bool,
    pub iterations: usize,
    /// `‖ψ̄ − ψ‖ / max(1, ‖ψ‖)` at the last step.
    pub residual: f64,
    /// `Σ_i d2_i` from the last projection.
    pub multiplier: DVector<f64>,
    pub kkt_residual: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub solution: Solution,
    pub trace: Vec<TraceRecord>,
    pub steps: StepSizes,
}

/// Something that advances a DR iteration one step at a time.
pub trait Stepper {
    type Error;
    /// Performs step `k` and returns `‖ψ̄ − ψ‖`.
    fn step(&mut self, k: usize) -> Result<f64, Self::Error>;
    /// Current `ψ`, stacked.
    fn psi(&self) -> DVector<f64>;
    fn into_state(self) -> IterateState;
}

struct EngineStepper<'e, 'a> {
    engine: &'e Engine<'a>,
    state: IterateState,
}

impl Stepper for EngineStepper<'_, '_> {
    type Error = EngineError;

    fn step(&mut self, k: usize) -> Result<f64, EngineError> {
        self.engine.dr_step(&mut self.state, k)
    }

    fn psi(&self) -> DVector<f64> {
        self.state.psi.clone()
    }

    fn into_state(self) -> IterateState {
        self.state
    }
}

/// Runs `stepper` under the stopping rule and metrics of `opts`; never fails on non-convergence.
pub fn drive<S: Stepper>(instance: &ProblemInstance, opts: &RunOptions, steps: StepSizes, mut stepper: S) -> Result<RunOutput, S::Error> {
    let lay = Layout::new(instance);
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev = stepper.psi();
    for k in 0..opts.max_iter {
        let abs = stepper.step(k)?;
        let next = stepper.psi();
        iterations = k + 1;
        residual = abs / next.norm().max(1.0);
        let wall = if opts.wall_clock { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        trace.push(compute_metrics(k, &prev, &next, instance, &lay, opts.x_star.as_ref(), abs, wall));
        prev = next;
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    let solution = finish(instance, &lay, stepper.into_state(), converged, iterations, residual);
    Ok(RunOutput { solution, trace, steps })
}

/// Step sizes from `opts`, or the Gershgorin choice with `opts.gamma`.
pub fn resolve_steps(instance: &ProblemInstance, opts: &RunOptions) -> StepSizes {
    opts.step_sizes
        .clone()
        .unwrap_or_else(|| choose_step_sizes(instance, opts.safety).with_gamma(GammaSchedule::Constant(opts.gamma)))
}

/// Initial state from `opts.init`, or zeros.
pub fn initial_state(layout: &Layout, opts: &RunOptions) -> Result<IterateState, EngineError> {
    match &opts.init {
        Some(t) if t.len() != layout.dim() => {
            Err(EngineError::DimensionMismatch(format!("init has {} entries, expected {}", t.len(), layout.dim())))
        }
        Some(t) => Ok(IterateState::from_tilde(layout, t.clone())),
        None => Ok(IterateState::zeros(layout)),
    }
}

/// Seeded `ψ̃` with entries uniform in `[-scale, scale]`.
pub fn random_tilde(layout: &Layout, seed: u64, scale: f64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(layout.dim(), |_, _| rng.gen_range(-scale..=scale))
}

/// Iterates until the relative residual drops below `tol` or `max_iter` steps are done.
pub fn run(instance: &ProblemInstance, opts: &RunOptions) -> Result<RunOutput, EngineError> {
    let engine = Engine::with_threads(instance, resolve_steps(instance, opts), opts.threads)?;
    let state = initial_state(engine.layout(), opts)?;
    let out = drive(instance, opts, engine.steps().clone(), EngineStepper { engine: &engine, state })?;
    if out.solution.converged {
        Ok(out)
    } else {
        Err(EngineError::MaxIterExceeded(Box::new(out)))
    }
}

fn finish(instance: &ProblemInstance, lay: &Layout, state: IterateState, converged: bool, iterations: usize, residual: f64) -> Solution {
    let psi = &state.psi;
    let x: Vec<DVector<f64>> = (0..lay.n_agents()).map(|i| DVector::from_column_slice(&psi.as_slice()[lay.x(i)])).collect();
    let sigma = (0..lay.n_agents()).map(|i| DVector::from_column_slice(&psi.as_slice()[lay.sigma(i)])).collect();
    let lambda = (0..lay.n_edges()).map(|e| DVector::from_column_slice(&psi.as_slice()[lay.lambda(e)])).collect();
    let omega = DVector::from_column_slice(&psi.as_slice()[lay.omega_all()]);
    let mut multiplier = DVector::zeros(lay.l());
    for d in &state.d2 {
        multiplier += d;
    }
    let kkt_residual = kkt_check(instance, &x, &multiplier);
    Solution { x, sigma, lambda, omega, state, converged, iterations, residual, multiplier, kkt_residual }
}

impl RunOutput {
    /// Stacked final decision.
    pub fn x_stacked(&self, instance: &ProblemInstance) -> DVector<f64> {
        instance.stack(&self.solution.x)
    }
}

/// Accepts both outcomes of [`run`], returning the output and whether it converged.
pub fn run_lenient(instance: &ProblemInstance, opts: &RunOptions) -> Result<RunOutput, EngineError> {
    match run(instance, opts) {
        Ok(o) => Ok(o),
        Err(EngineError::MaxIterExceeded(o)) => Ok(*o),
        Err(e) => Err(e),
    }
}
