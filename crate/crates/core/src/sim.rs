//! Phase-synchronous message-passing execution of the DR iteration.
//!
//! Agents own `[x_i; σ_i; y_i; y_ji …]` and edge arbitrators own `(λ_e, μ_e)`.
//! Every value an entity uses that it does not own arrives as a message from an
//! incident entity. Each entity evaluates the same kernels as [`crate::engine`]
//! on its own block, so the stacked state matches the engine bit for bit.
//!
//! Entity ids: agents are `0..N`, the arbitrator of edge `e` is `N + e`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{drive, initial_state, resolve_steps, EngineError, IterateState, RunOptions, RunOutput, StepSizes, Stepper};
use crate::layout::Layout;
use crate::problem::{AgentSpec, CommGraph, ProblemInstance};
use crate::qp::WorkingSet;
use crate::resolvents::{
    acu_dual, acu_estimate, acu_own, coupled_sum, incidence_sum, km_update, reflect, resolvent_a_edge,
    resolvent_b_edge, AgentKernel, ProjectionKernel, ResolventError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("round {round}, {phase:?}: entity {from} sent to non-incident entity {to}")]
    ProtocolViolation { round: usize, phase: Phase, from: usize, to: usize },
    #[error("entity {entity} expected a {phase:?} message from {from} that never arrived")]
    MissingMessage { entity: usize, phase: Phase, from: usize },
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("message log: {0}")]
    Log(#[from] std::io::Error),
}

/// Message phases of one round, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Phase {
    /// Head sends `ỹ_ij` and the edge sends `μ̃_ij` to the tail.
    AcuEstimatePush,
    /// Tail sends its new `y_i`, head sends `ỹ_ij`, both to the edge.
    AcuYPush,
    /// Edge sends the new `μ_ij` to the head.
    AcuMuPush,
    /// Edge sends `λ̃` to both endpoints.
    LambdaTildePush,
    /// Agents send `A_i x̂_i + σ̂_i` to incident edges.
    HatSumPush,
    /// Edge sends `λ̂` to both endpoints.
    LambdaHatPush,
    /// Agents send `A_i x̄_i + σ̄_i` to incident edges.
    BarSumPush,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::AcuEstimatePush,
        Phase::AcuYPush,
        Phase::AcuMuPush,
        Phase::LambdaTildePush,
        Phase::HatSumPush,
        Phase::LambdaHatPush,
        Phase::BarSumPush,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub round: usize,
    pub phase: Phase,
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntityKind {
    Agent,
    EdgeArbitrator,
}

type Inbox = BTreeMap<usize, Vec<f64>>;

fn take(inbox: &mut Inbox, entity: usize, phase: Phase, from: usize) -> Result<Vec<f64>, SimError> {
    inbox.remove(&from).ok_or(SimError::MissingMessage { entity, phase, from })
}

/// Agent `i`: its block of `ψ̃`, `ψ`, `ψ̂`, `ψ̄` in the local order `[x; σ; y_i; y_ji …]`.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    n: usize,
    l: usize,
    /// Incident edges ascending, with the edge entity id.
    incident: Vec<(usize, f64)>,
    out_edges: Vec<(usize, usize)>,
    in_edges: Vec<(usize, usize)>,
    tau4: f64,
    /// `τ4` of each in-neighbor, in `in_edges` order.
    tau4_in: Vec<f64>,
    pub tilde: DVector<f64>,
    pub psi: DVector<f64>,
    pub hat: DVector<f64>,
    pub bar: DVector<f64>,
    pub d2: DVector<f64>,
    warm: Option<(DVector<f64>, WorkingSet)>,
    hat_sum: DVector<f64>,
    inbox: Inbox,
    spec: AgentSpec,
    prox: AgentKernel,
    projection: ProjectionKernel,
}

/// Arbitrator of edge `(tail, head)`.
#[derive(Clone, Debug)]
pub struct EdgeState {
    pub id: usize,
    pub edge: usize,
    pub tail: usize,
    pub head: usize,
    tau3: f64,
    tau4_tail: f64,
    pub lambda_tilde: DVector<f64>,
    pub mu_tilde: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub mu_hat: DVector<f64>,
    pub lambda_bar: DVector<f64>,
    tail_hat: Vec<f64>,
    head_hat: Vec<f64>,
    inbox: Inbox,
}

impl AgentState {
    /// Number of owned scalars: `n_i + l(2 + in-degree)`.
    pub fn state_size(&self) -> usize {
        self.tilde.len()
    }

    fn x(&self) -> std::ops::Range<usize> {
        0..self.n
    }

    fn sigma(&self) -> std::ops::Range<usize> {
        self.n..self.n + self.l
    }

    fn y(&self) -> std::ops::Range<usize> {
        self.n + self.l..self.n + 2 * self.l
    }

    fn est(&self, slot: usize) -> std::ops::Range<usize> {
        let s = self.n + self.l * (2 + slot);
        s..s + self.l
    }

    fn lambda_ib(&mut self, phase: Phase) -> Result<DVector<f64>, SimError> {
        let mut lams = Vec::with_capacity(self.incident.len());
        for &(edge_id, sign) in &self.incident {
            lams.push((sign, take(&mut self.inbox, self.id, phase, edge_id)?));
        }
        Ok(incidence_sum(self.l, lams.iter().map(|(s, v)| (*s, v.as_slice()))))
    }
}

/// All entities plus the message router.
pub struct SimWorld {
    n_agents: usize,
    graph: CommGraph,
    agents: Vec<AgentState>,
    edges: Vec<EdgeState>,
    steps: StepSizes,
    round: usize,
    /// Fail on the first non-incident message instead of only recording it.
    pub strict: bool,
    /// Entity execution order inside a phase; results do not depend on it.
    schedule: Vec<usize>,
    injected: Vec<Message>,
    audit: AuditReport,
    log: Option<Box<dyn Write + Send>>,
    pool: Option<rayon::ThreadPool>,
}

/// One line of the JSON-lines message log.
#[derive(Serialize)]
struct LogRecord {
    round: usize,
    phase: Phase,
    from: usize,
    to: usize,
    len: usize,
}

/// Observed communication pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub pairs: BTreeSet<(usize, usize)>,
    pub violations: Vec<(usize, Phase, usize, usize)>,
    /// Round the per-round counters start at.
    pub first_round: usize,
    pub messages_per_round: Vec<usize>,
    pub bytes_per_round: Vec<usize>,
    /// Payload bytes sent by each entity over all audited rounds.
    pub bytes_sent: BTreeMap<usize, usize>,
}

/// Creates one agent entity per agent and one arbitrator per edge.
pub fn spawn_topology(instance: &ProblemInstance, steps: StepSizes) -> Result<SimWorld, SimError> {
    let graph = instance.graph().clone();
    let n_agents = instance.n_agents();
    let l = instance.l();
    if steps.tau1.len() != n_agents || steps.tau3.len() != graph.n_edges() {
        return Err(EngineError::DimensionMismatch("step sizes do not match the instance".into()).into());
    }
    let mut agents = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let spec = instance.agent(i);
        let in_edges: Vec<(usize, usize)> = graph.in_edges(i).iter().map(|&e| (e, graph.edge(e).0)).collect();
        let tau4_in: Vec<f64> = in_edges.iter().map(|&(_, t)| steps.tau4[t]).collect();
        let prox = AgentKernel::new(spec, steps.tau1[i], steps.tau2[i]).ok_or(EngineError::SingularSystem { agent: i })?;
        let projection = ProjectionKernel::new(instance, i, steps.tau1[i], steps.tau2[i], steps.tau4[i], &tau4_in);
        let size = spec.n() + l * (2 + in_edges.len());
        agents.push(AgentState {
            id: i,
            n: spec.n(),
            l,
            incident: graph.incident_edges(i).iter().map(|&e| (n_agents + e, graph.orientation(i, e))).collect(),
            out_edges: graph.out_edges(i).iter().map(|&e| (e, graph.edge(e).1)).collect(),
            in_edges,
            tau4: steps.tau4[i],
            tau4_in,
            tilde: DVector::zeros(size),
            psi: DVector::zeros(size),
            hat: DVector::zeros(size),
            bar: DVector::zeros(size),
            d2: DVector::zeros(l),
            warm: None,
            hat_sum: DVector::zeros(l),
            inbox: Inbox::new(),
            spec: spec.clone(),
            prox,
            projection,
        });
    }
    let z = DVector::zeros(l);
    let edges = (0..graph.n_edges())
        .map(|e| {
            let (tail, head) = graph.edge(e);
            EdgeState {
                id: n_agents + e,
                edge: e,
                tail,
                head,
                tau3: steps.tau3[e],
                tau4_tail: steps.tau4[tail],
                lambda_tilde: z.clone(),
                mu_tilde: z.clone(),
                lambda: z.clone(),
                mu: z.clone(),
                lambda_hat: z.clone(),
                mu_hat: z.clone(),
                lambda_bar: z.clone(),
                tail_hat: vec![0.0; l],
                head_hat: vec![0.0; l],
                inbox: Inbox::new(),
            }
        })
        .collect();
    let schedule = (0..n_agents + graph.n_edges()).collect();
    Ok(SimWorld {
        n_agents,
        graph,
        agents,
        edges,
        steps,
        round: 0,
        strict: true,
        schedule,
        injected: Vec::new(),
        audit: AuditReport::default(),
        log: None,
        pool: None,
    })
}

impl SimWorld {
    pub fn n_entities(&self) -> usize {
        self.agents.len() + self.edges.len()
    }

    pub fn kind(&self, id: usize) -> EntityKind {
        if id < self.n_agents {
            EntityKind::Agent
        } else {
            EntityKind::EdgeArbitrator
        }
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn edges(&self) -> &[EdgeState] {
        &self.edges
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn steps(&self) -> &StepSizes {
        &self.steps
    }

    pub fn audit(&self) -> &AuditReport {
        &self.audit
    }

    /// Entities `id` may exchange messages with.
    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        (0..self.n_entities()).filter(|&o| self.incident(id, o)).collect()
    }

    /// Agent and its edges, edge and its endpoints, or two agents joined by an edge.
    pub fn incident(&self, a: usize, b: usize) -> bool {
        let n = self.n_agents;
        match (a < n, b < n) {
            (true, true) => a != b && self.graph.edges().iter().any(|&(t, h)| (t, h) == (a, b) || (t, h) == (b, a)),
            (true, false) => self.graph.edges().get(b - n).is_some_and(|&(t, h)| t == a || h == a),
            (false, true) => self.graph.edges().get(a - n).is_some_and(|&(t, h)| t == b || h == b),
            (false, false) => false,
        }
    }

    /// Runs agent work on `threads` workers (0 = sequential).
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.pool = (threads > 0).then(|| rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool"));
        self
    }

    /// Writes one JSON line per delivered message.
    pub fn with_log(mut self, log: Box<dyn Write + Send>) -> Self {
        self.log = Some(log);
        self
    }

    /// Changes the order entities execute within a phase; must be a permutation of all ids.
    pub fn set_schedule(&mut self, order: Vec<usize>) {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..self.n_entities()).collect::<Vec<_>>(), "schedule must be a permutation");
        self.schedule = order;
    }

    /// Queues an extra message for the next delivery; receivers ignore unexpected senders.
    pub fn inject(&mut self, msg: Message) {
        self.injected.push(msg);
    }

    /// Installs `ψ̃` from a stacked vector (setup only, outside the protocol).
    pub fn load_tilde(&mut self, layout: &Layout, tilde: &DVector<f64>) {
        let t = tilde.as_slice();
        for a in &mut self.agents {
            let i = a.id;
            let mut v = Vec::with_capacity(a.tilde.len());
            v.extend_from_slice(&t[layout.x(i)]);
            v.extend_from_slice(&t[layout.sigma(i)]);
            v.extend_from_slice(&t[layout.y(i)]);
            for &(e, _) in &a.in_edges {
                v.extend_from_slice(&t[layout.y_est(e)]);
            }
            a.tilde = DVector::from_vec(v);
            a.psi = a.tilde.clone();
        }
        for ed in &mut self.edges {
            ed.lambda_tilde = DVector::from_column_slice(&t[layout.lambda(ed.edge)]);
            ed.mu_tilde = DVector::from_column_slice(&t[layout.mu(ed.edge)]);
            ed.lambda = ed.lambda_tilde.clone();
            ed.mu = ed.mu_tilde.clone();
        }
    }

    /// Stacks every entity's block into the engine's layout (observation only).
    pub fn gather(&self, layout: &Layout) -> IterateState {
        let mut st = IterateState::zeros(layout);
        for a in &self.agents {
            let i = a.id;
            for (dst, src) in [(&mut st.tilde, &a.tilde), (&mut st.psi, &a.psi), (&mut st.hat, &a.hat), (&mut st.bar, &a.bar)] {
                let d = dst.as_mut_slice();
                d[layout.x(i)].copy_from_slice(&src.as_slice()[a.x()]);
                d[layout.sigma(i)].copy_from_slice(&src.as_slice()[a.sigma()]);
                d[layout.y(i)].copy_from_slice(&src.as_slice()[a.y()]);
                for (slot, &(e, _)) in a.in_edges.iter().enumerate() {
                    d[layout.y_est(e)].copy_from_slice(&src.as_slice()[a.est(slot)]);
                }
            }
            st.d2[i] = a.d2.clone();
            st.warm[i] = a.warm.clone();
        }
        for ed in &self.edges {
            let e = ed.edge;
            st.tilde.as_mut_slice()[layout.lambda(e)].copy_from_slice(ed.lambda_tilde.as_slice());
            st.tilde.as_mut_slice()[layout.mu(e)].copy_from_slice(ed.mu_tilde.as_slice());
            st.psi.as_mut_slice()[layout.lambda(e)].copy_from_slice(ed.lambda.as_slice());
            st.psi.as_mut_slice()[layout.mu(e)].copy_from_slice(ed.mu.as_slice());
            st.hat.as_mut_slice()[layout.lambda(e)].copy_from_slice(ed.lambda_hat.as_slice());
            st.hat.as_mut_slice()[layout.mu(e)].copy_from_slice(ed.mu_hat.as_slice());
            st.bar.as_mut_slice()[layout.lambda(e)].copy_from_slice(ed.lambda_bar.as_slice());
            st.bar.as_mut_slice()[layout.mu(e)].copy_from_slice(ed.mu_hat.as_slice());
        }
        st
    }

    /// Sorts by `(from, to)`, checks incidence, logs and fills inboxes.
    fn deliver(&mut self, phase: Phase, mut outgoing: Vec<Message>) -> Result<(), SimError> {
        outgoing.append(&mut self.injected);
        outgoing.sort_by_key(|m| (m.from, m.to));
        let round = self.round;
        let slot = round - self.audit.first_round;
        if self.audit.messages_per_round.len() <= slot {
            self.audit.messages_per_round.resize(slot + 1, 0);
            self.audit.bytes_per_round.resize(slot + 1, 0);
        }
        for m in outgoing {
            let bytes = m.payload.len() * std::mem::size_of::<f64>();
            self.audit.pairs.insert((m.from, m.to));
            self.audit.messages_per_round[slot] += 1;
            self.audit.bytes_per_round[slot] += bytes;
            *self.audit.bytes_sent.entry(m.from).or_default() += bytes;
            if let Some(log) = self.log.as_mut() {
                let rec = LogRecord { round, phase, from: m.from, to: m.to, len: m.payload.len() };
                serde_json::to_writer(&mut *log, &rec).map_err(std::io::Error::from)?;
                log.write_all(b"\n")?;
            }
            if m.to >= self.n_entities() || !self.incident(m.from, m.to) {
                self.audit.violations.push((round, phase, m.from, m.to));
                if self.strict {
                    return Err(SimError::ProtocolViolation { round, phase, from: m.from, to: m.to });
                }
                continue;
            }
            let inbox = if m.to < self.n_agents {
                &mut self.agents[m.to].inbox
            } else {
                &mut self.edges[m.to - self.n_agents].inbox
            };
            inbox.insert(m.from, m.payload);
        }
        Ok(())
    }

    /// Collects outgoing messages from every entity in schedule order.
    fn emit(&self, phase: Phase, agent: impl Fn(&AgentState) -> Vec<(usize, Vec<f64>)>, edge: impl Fn(&EdgeState) -> Vec<(usize, Vec<f64>)>) -> Vec<Message> {
        let mut out = Vec::new();
        for &id in &self.schedule {
            let (from, sends) = if id < self.n_agents {
                (id, agent(&self.agents[id]))
            } else {
                (id, edge(&self.edges[id - self.n_agents]))
            };
            out.extend(sends.into_iter().map(|(to, payload)| Message { round: self.round, phase, from, to, payload }));
        }
        out
    }

    fn agents_do<F>(&mut self, f: F) -> Result<(), SimError>
    where
        F: Fn(&mut AgentState) -> Result<(), SimError> + Sync + Send,
    {
        let order = self.schedule.iter().copied().filter(|&id| id < self.n_agents);
        match &self.pool {
            Some(pool) => {
                let agents = &mut self.agents;
                pool.install(|| agents.par_iter_mut().map(&f).collect::<Result<Vec<()>, SimError>>())?;
            }
            None => {
                for id in order.collect::<Vec<_>>() {
                    f(&mut self.agents[id])?;
                }
            }
        }
        Ok(())
    }

    fn edges_do<F>(&mut self, f: F) -> Result<(), SimError>
    where
        F: Fn(&mut EdgeState) -> Result<(), SimError>,
    {
        let n = self.n_agents;
        for id in self.schedule.clone() {
            if id >= n {
                f(&mut self.edges[id - n])?;
            }
        }
        Ok(())
    }

    /// One full DR iteration carried out through messages.
    pub fn run_round(&mut self, k: usize) -> Result<(), SimError> {
        let n = self.n_agents;
        let gamma = self.steps.gamma.at(k);

        // ACU: tails gather (μ̃_ij, ỹ_ij) of their out-edges
        let msgs = self.emit(
            Phase::AcuEstimatePush,
            |a| a.in_edges.iter().enumerate().map(|(s, &(_, tail))| (tail, a.tilde.as_slice()[a.est(s)].to_vec())).collect(),
            |e| vec![(e.tail, e.mu_tilde.as_slice().to_vec())],
        );
        self.deliver(Phase::AcuEstimatePush, msgs)?;
        self.agents_do(|a| {
            let ph = Phase::AcuEstimatePush;
            let mut terms = Vec::with_capacity(a.out_edges.len());
            for &(e, head) in &a.out_edges {
                let mu = take(&mut a.inbox, a.id, ph, n + e)?;
                let est = take(&mut a.inbox, a.id, ph, head)?;
                terms.push((mu, est));
            }
            let refs: Vec<(&[f64], &[f64])> = terms.iter().map(|(m, y)| (m.as_slice(), y.as_slice())).collect();
            let y = acu_own(&a.tilde.as_slice()[a.y()], &refs, a.tau4);
            let r = a.y();
            a.psi.as_mut_slice()[r].copy_from_slice(y.as_slice());
            Ok(())
        })?;

        let msgs = self.emit(
            Phase::AcuYPush,
            |a| {
                let mut s: Vec<(usize, Vec<f64>)> = a.out_edges.iter().map(|&(e, _)| (n + e, a.psi.as_slice()[a.y()].to_vec())).collect();
                s.extend(a.in_edges.iter().enumerate().map(|(slot, &(e, _))| (n + e, a.tilde.as_slice()[a.est(slot)].to_vec())));
                s
            },
            |_| Vec::new(),
        );
        self.deliver(Phase::AcuYPush, msgs)?;
        self.edges_do(|e| {
            let ph = Phase::AcuYPush;
            let y_tail = take(&mut e.inbox, e.id, ph, e.tail)?;
            let est = take(&mut e.inbox, e.id, ph, e.head)?;
            e.mu = acu_dual(e.mu_tilde.as_slice(), &est, &y_tail, e.tau4_tail);
            Ok(())
        })?;

        let msgs = self.emit(Phase::AcuMuPush, |_| Vec::new(), |e| vec![(e.head, e.mu.as_slice().to_vec())]);
        self.deliver(Phase::AcuMuPush, msgs)?;
        self.agents_do(|a| {
            for slot in 0..a.in_edges.len() {
                let mu = take(&mut a.inbox, a.id, Phase::AcuMuPush, n + a.in_edges[slot].0)?;
                let r = a.est(slot);
                let est = acu_estimate(&a.tilde.as_slice()[r.clone()], &mu, a.tau4_in[slot]);
                a.psi.as_mut_slice()[r].copy_from_slice(est.as_slice());
            }
            Ok(())
        })?;

        // A: agent prox, then reflected sums to the edges
        let msgs = self.emit(
            Phase::LambdaTildePush,
            |_| Vec::new(),
            |e| vec![(e.tail, e.lambda_tilde.as_slice().to_vec()), (e.head, e.lambda_tilde.as_slice().to_vec())],
        );
        self.deliver(Phase::LambdaTildePush, msgs)?;
        self.agents_do(|a| {
            let lam = a.lambda_ib(Phase::LambdaTildePush)?;
            let (x, s) = a.prox.solve(&a.tilde.as_slice()[a.x()], &a.tilde.as_slice()[a.sigma()], &lam);
            let (rx, rs) = (a.x(), a.sigma());
            a.psi.as_mut_slice()[rx].copy_from_slice(x.as_slice());
            a.psi.as_mut_slice()[rs].copy_from_slice(s.as_slice());
            reflect(a.psi.as_slice(), a.tilde.as_slice(), a.hat.as_mut_slice());
            a.hat_sum = coupled_sum(&a.spec.coupling, &a.hat.as_slice()[a.x()], &a.hat.as_slice()[a.sigma()]);
            Ok(())
        })?;

        let msgs = self.emit(
            Phase::HatSumPush,
            |a| a.incident.iter().map(|&(e, _)| (e, a.hat_sum.as_slice().to_vec())).collect(),
            |_| Vec::new(),
        );
        self.deliver(Phase::HatSumPush, msgs)?;
        self.edges_do(|e| {
            let ph = Phase::HatSumPush;
            e.tail_hat = take(&mut e.inbox, e.id, ph, e.tail)?;
            e.head_hat = take(&mut e.inbox, e.id, ph, e.head)?;
            e.lambda = resolvent_a_edge(e.lambda_tilde.as_slice(), e.tau3, &e.tail_hat, &e.head_hat);
            reflect(e.lambda.as_slice(), e.lambda_tilde.as_slice(), e.lambda_hat.as_mut_slice());
            reflect(e.mu.as_slice(), e.mu_tilde.as_slice(), e.mu_hat.as_mut_slice());
            Ok(())
        })?;

        // B: agent projections, then edge updates from the new sums
        let msgs = self.emit(
            Phase::LambdaHatPush,
            |_| Vec::new(),
            |e| vec![(e.tail, e.lambda_hat.as_slice().to_vec()), (e.head, e.lambda_hat.as_slice().to_vec())],
        );
        self.deliver(Phase::LambdaHatPush, msgs)?;
        self.agents_do(|a| {
            let lam = a.lambda_ib(Phase::LambdaHatPush)?;
            let hat = a.hat.as_slice();
            let out = a.projection.solve(
                &a.spec,
                &hat[a.x()],
                &hat[a.sigma()],
                &hat[a.n + a.l..],
                &lam,
                a.warm.as_ref().map(|(z, ws)| (z, ws)),
            )?;
            a.bar.copy_from(&out.z);
            a.d2 = out.d2;
            a.warm = Some((out.z, out.working_set));
            Ok(())
        })?;

        let msgs = self.emit(
            Phase::BarSumPush,
            |a| {
                let s = coupled_sum(&a.spec.coupling, &a.bar.as_slice()[a.x()], &a.bar.as_slice()[a.sigma()]);
                a.incident.iter().map(|&(e, _)| (e, s.as_slice().to_vec())).collect()
            },
            |_| Vec::new(),
        );
        self.deliver(Phase::BarSumPush, msgs)?;
        self.edges_do(|e| {
            let ph = Phase::BarSumPush;
            let tail_bar = take(&mut e.inbox, e.id, ph, e.tail)?;
            let head_bar = take(&mut e.inbox, e.id, ph, e.head)?;
            e.lambda_bar = resolvent_b_edge(e.lambda_hat.as_slice(), e.tau3, &tail_bar, &head_bar, &e.tail_hat, &e.head_hat);
            Ok(())
        })?;

        // local averaging
        for a in &mut self.agents {
            km_update(a.tilde.as_mut_slice(), a.psi.as_slice(), a.bar.as_slice(), gamma);
            a.inbox.clear();
        }
        for e in &mut self.edges {
            km_update(e.lambda_tilde.as_mut_slice(), e.lambda.as_slice(), e.lambda_bar.as_slice(), gamma);
            km_update(e.mu_tilde.as_mut_slice(), e.mu.as_slice(), e.mu_hat.as_slice(), gamma);
            e.inbox.clear();
        }
        self.round += 1;
        Ok(())
    }
}

/// Runs `rounds` rounds without failing on violations and returns what was observed.
pub fn locality_audit(world: &mut SimWorld, rounds: usize) -> Result<AuditReport, SimError> {
    let strict = world.strict;
    world.strict = false;
    let start = world.round;
    world.audit = AuditReport { first_round: start, ..AuditReport::default() };
    let result = (0..rounds).try_for_each(|k| world.run_round(start + k));
    world.strict = strict;
    result?;
    Ok(world.audit.clone())
}

struct SimStepper {
    world: SimWorld,
    layout: Layout,
    state: IterateState,
}

impl Stepper for SimStepper {
    type Error = SimError;

    fn step(&mut self, k: usize) -> Result<f64, SimError> {
        self.world.run_round(k)?;
        self.state = self.world.gather(&self.layout);
        Ok((&self.state.bar - &self.state.psi).norm())
    }

    fn psi(&self) -> DVector<f64> {
        self.state.psi.clone()
    }

    fn into_state(self) -> IterateState {
        self.state
    }
}

/// Same contract as [`crate::engine::run_lenient`], executed through the simulator.
pub fn run_simulated(instance: &ProblemInstance, opts: &RunOptions, log: Option<Box<dyn Write + Send>>) -> Result<RunOutput, SimError> {
    let steps = resolve_steps(instance, opts);
    let layout = Layout::new(instance);
    let state = initial_state(&layout, opts)?;
    let mut world = spawn_topology(instance, steps.clone())?.with_threads(opts.threads);
    if let Some(log) = log {
        world = world.with_log(log);
    }
    world.load_tilde(&layout, &state.tilde);
    drive(instance, opts, steps, SimStepper { world, layout, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{choose_step_sizes, Engine, GammaSchedule};
    use crate::problem::two_agent_instance;

    fn noisy(dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |k, _| (k as f64 * 0.61).sin())
    }

    #[test]
    fn two_agents_give_four_entities() {
        let inst = two_agent_instance(1.0).unwrap();
        let w = spawn_topology(&inst, choose_step_sizes(&inst, 0.5)).unwrap();
        assert_eq!(w.n_entities(), 4);
        assert_eq!(w.kind(3), EntityKind::EdgeArbitrator);
        assert_eq!(w.neighbors(0), vec![1, 2, 3]);
    }

    #[test]
    fn rounds_match_engine_bitwise() {
        let inst = two_agent_instance(1.0).unwrap();
        let steps = choose_step_sizes(&inst, 0.5);
        let engine = Engine::new(&inst, steps.clone()).unwrap();
        let lay = engine.layout().clone();
        let mut st = IterateState::from_tilde(&lay, noisy(lay.dim()));
        let mut w = spawn_topology(&inst, steps).unwrap();
        w.load_tilde(&lay, &st.tilde);
        for k in 0..5 {
            engine.dr_step(&mut st, k).unwrap();
            w.run_round(k).unwrap();
            let g = w.gather(&lay);
            assert_eq!(g.tilde, st.tilde);
            assert_eq!(g.psi, st.psi);
            assert_eq!(g.bar, st.bar);
        }
    }

    #[test]
    fn thirteen_messages_per_edge() {
        let inst = two_agent_instance(1.0).unwrap();
        let mut w = spawn_topology(&inst, choose_step_sizes(&inst, 0.5)).unwrap();
        let report = locality_audit(&mut w, 3).unwrap();
        assert_eq!(report.messages_per_round, vec![26; 3]);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn injected_message_is_flagged() {
        let inst = two_agent_instance(1.0).unwrap();
        let mut w = spawn_topology(&inst, choose_step_sizes(&inst, 0.5)).unwrap();
        w.inject(Message { round: 0, phase: Phase::HatSumPush, from: 2, to: 3, payload: vec![1.0] });
        let report = locality_audit(&mut w, 1).unwrap();
        assert_eq!(report.violations.len(), 1);
        w.inject(Message { round: 1, phase: Phase::HatSumPush, from: 2, to: 3, payload: vec![1.0] });
        assert!(matches!(w.run_round(1), Err(SimError::ProtocolViolation { from: 2, to: 3, .. })));
    }

    #[test]
    fn schedule_order_does_not_matter() {
        let inst = two_agent_instance(1.0).unwrap();
        let steps = choose_step_sizes(&inst, 0.5);
        let lay = Layout::new(&inst);
        let mut a = spawn_topology(&inst, steps.clone()).unwrap();
        let mut b = spawn_topology(&inst, steps).unwrap();
        b.set_schedule(vec![3, 1, 2, 0]);
        a.load_tilde(&lay, &noisy(lay.dim()));
        b.load_tilde(&lay, &noisy(lay.dim()));
        for k in 0..3 {
            a.run_round(k).unwrap();
            b.run_round(k).unwrap();
        }
        assert_eq!(a.gather(&lay).tilde, b.gather(&lay).tilde);
    }

    #[test]
    fn zero_gamma_keeps_tilde() {
        let inst = two_agent_instance(1.0).unwrap();
        let steps = choose_step_sizes(&inst, 0.5).with_gamma(GammaSchedule::Constant(0.0));
        let lay = Layout::new(&inst);
        let mut w = spawn_topology(&inst, steps).unwrap();
        w.run_round(0).unwrap();
        assert_eq!(w.gather(&lay).tilde, DVector::zeros(lay.dim()));
    }
}
