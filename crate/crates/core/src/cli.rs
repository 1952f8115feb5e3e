//! Command-line front end. Exit codes: 0 success, 1 non-convergence or failed check, 2 bad input.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::bench::{allocation, BenchConfig, BenchError};
use crate::engine::{
    compute_metrics, random_tilde, run_lenient, threads_from_env, write_trace_csv, EngineError, Layout, RunOptions, RunOutput,
};
use crate::oracle::{operator_zero_residual, solve_centralized};
use crate::problem::io::{parse_instance, LoadError};
use crate::problem::{build_problem, eval_objective, slater_slack, CommGraph, ModelError, ProblemInstance, WeightRule};
use crate::sim::run_simulated;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "aggsplit", version, about = "Distributed Douglas-Rachford solver for aggregative multi-agent problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check convexity, Slater's condition and graph connectivity of an instance.
    Validate { instance: PathBuf },
    /// Solve an instance.
    Run {
        instance: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        /// Summary JSON path; printed to stdout when absent.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Solve the centralized problem directly.
    Oracle {
        instance: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a commodity-distribution instance and solve it.
    Bench {
        config: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        /// Receives trace.csv, summary.json and allocation.json.
        #[arg(long, default_value = "bench-out")]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Monolithic,
    Simulated,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, value_enum, default_value_t = Mode::Monolithic)]
    pub mode: Mode,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub safety: f64,
    /// Per-iteration metrics CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Solve the centralized problem too and report the distance to it.
    #[arg(long)]
    pub oracle_compare: bool,
    /// JSON-lines message log (simulated mode).
    #[arg(long)]
    pub log_messages: Option<PathBuf>,
    /// Random initial point instead of zeros.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-run monolithically and require bit-identical iterates (simulated mode).
    #[arg(long)]
    pub check_equivalence: bool,
    /// Record elapsed time in the trace; outputs are then no longer reproducible byte for byte.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub consensus_gap: f64,
    pub tracking_gap: f64,
    pub operator_zero_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_dist_to_oracle: Option<f64>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn input(message: impl std::fmt::Display) -> Self {
        Self { code: EXIT_INPUT, message: message.to_string() }
    }

    fn failed(message: impl std::fmt::Display) -> Self {
        Self { code: EXIT_FAILED, message: message.to_string() }
    }
}

fn report(result: Result<i32, Failure>) -> i32 {
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Validate { instance } => cmd_validate(&instance),
        Command::Run { instance, solver, summary } => cmd_run(&instance, &solver, summary.as_deref()),
        Command::Oracle { instance, tol, out } => cmd_oracle(&instance, tol, out.as_deref()),
        Command::Bench { config, solver, out_dir } => cmd_bench(&config, &solver, &out_dir),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<ProblemInstance, Failure> {
    let json = parse_instance(&read(path)?).map_err(Failure::input)?;
    json.build().map_err(|e| Failure::input(LoadError::Invalid(e)))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Failure::input)?;
    writeln!(w).and_then(|_| w.flush()).map_err(Failure::input)
}

pub fn cmd_validate(path: &Path) -> i32 {
    report(validate(path))
}

fn check_line(name: &str, outcome: &Result<String, ModelError>) -> bool {
    match outcome {
        Ok(detail) => println!("{name:<13} ok  {detail}"),
        Err(e) => println!("{name:<13} FAIL {e}"),
    }
    outcome.is_ok()
}

fn validate(path: &Path) -> Result<i32, Failure> {
    let json = parse_instance(&read(path)?).map_err(Failure::input)?;
    let agents = match json.agents.iter().enumerate().map(|(i, a)| a.to_spec(i)).collect::<Result<Vec<_>, _>>() {
        Ok(a) => a,
        Err(e) => {
            println!("{:<13} FAIL {e}", "dimensions");
            return Ok(EXIT_FAILED);
        }
    };
    let convexity = agents
        .iter()
        .enumerate()
        .try_for_each(|(i, a)| a.objective.check_convex().map_err(|reason| ModelError::NonConvexObjective { agent: i, reason }))
        .map(|_| format!("{} agents", agents.len()));
    let rule = json.graph.weights.clone().map_or_else(WeightRule::default, WeightRule::Given);
    let graph = CommGraph::new(agents.len(), json.graph.edges.clone(), rule);
    let connectivity = graph.as_ref().map(|g| format!("{} edges", g.n_edges())).map_err(clone_model_error);
    let capacity = DVector::from_vec(json.c.clone());
    let slater = match slater_slack(&agents, &capacity) {
        Ok(s) if s < -1e-9 => Ok(format!("slack {s:.3e}")),
        Ok(s) => Err(ModelError::SlaterViolation { slack: s }),
        Err(e) => Err(e),
    };
    let mut pass = check_line("convexity", &convexity);
    pass &= check_line("slater", &slater);
    pass &= check_line("connectivity", &connectivity);
    if let (true, Ok(g)) = (pass, graph) {
        let full = build_problem(agents, capacity, g).map(|_| String::new());
        pass &= check_line("instance", &full);
    }
    Ok(if pass { EXIT_OK } else { EXIT_FAILED })
}

fn clone_model_error(e: &ModelError) -> ModelError {
    match e {
        ModelError::DisconnectedGraph(m) => ModelError::DisconnectedGraph(m.clone()),
        other => ModelError::InvalidGraph(other.to_string()),
    }
}

fn options(instance: &ProblemInstance, args: &SolverArgs) -> Result<(RunOptions, Option<DVector<f64>>), Failure> {
    let layout = Layout::new(instance);
    let reference = if args.oracle_compare {
        let (x, _) = solve_centralized(instance, 1e-12).map_err(|e| Failure::failed(format!("oracle: {e}")))?;
        Some(x)
    } else {
        None
    };
    let opts = RunOptions {
        max_iter: args.max_iter,
        tol: args.tol,
        gamma: args.gamma,
        safety: args.safety,
        init: args.seed.map(|s| random_tilde(&layout, s, 1.0)),
        x_star: reference.clone(),
        wall_clock: args.wall_clock,
        threads: threads_from_env(),
        ..RunOptions::default()
    };
    Ok((opts, reference))
}

fn solve(instance: &ProblemInstance, args: &SolverArgs, opts: &RunOptions) -> Result<RunOutput, Failure> {
    if args.mode == Mode::Monolithic && (args.log_messages.is_some() || args.check_equivalence) {
        return Err(Failure::input("--log-messages and --check-equivalence need --mode simulated"));
    }
    match args.mode {
        Mode::Monolithic => run_lenient(instance, opts).map_err(engine_failure),
        Mode::Simulated => {
            let log = match &args.log_messages {
                Some(p) => Some(Box::new(create(p)?) as Box<dyn Write + Send>),
                None => None,
            };
            let out = run_simulated(instance, opts, log).map_err(Failure::failed)?;
            if args.check_equivalence {
                let mono = run_lenient(instance, opts).map_err(engine_failure)?;
                check_equivalence(&out, &mono)?;
                eprintln!("equivalence: simulated and monolithic iterates are bit-identical over {} rounds", out.solution.iterations);
            }
            Ok(out)
        }
    }
}

fn engine_failure(e: EngineError) -> Failure {
    match e {
        EngineError::DimensionMismatch(_) => Failure::input(e),
        e => Failure::failed(e),
    }
}

fn check_equivalence(sim: &RunOutput, mono: &RunOutput) -> Result<(), Failure> {
    let same_trace = sim.trace.len() == mono.trace.len()
        && sim.trace.iter().zip(&mono.trace).all(|(a, b)| {
            let (mut a, mut b) = (a.clone(), b.clone());
            a.wall_ms = 0.0;
            b.wall_ms = 0.0;
            a == b
        });
    let (s, m) = (&sim.solution.state, &mono.solution.state);
    let same_state = s.tilde == m.tilde && s.psi == m.psi && s.bar == m.bar;
    if same_trace && same_state {
        Ok(())
    } else {
        Err(Failure::failed("equivalence check: simulated and monolithic runs differ"))
    }
}

pub fn summarize(instance: &ProblemInstance, out: &RunOutput, reference: Option<&DVector<f64>>) -> Summary {
    let sol = &out.solution;
    let last = out.trace.last().cloned().unwrap_or_else(|| {
        let lay = Layout::new(instance);
        compute_metrics(0, &sol.state.psi, &sol.state.psi, instance, &lay, None, 0.0, 0.0)
    });
    let rel_dist_to_oracle = reference.map(|r| (out.x_stacked(instance) - r).norm() / r.norm().max(1e-12));
    Summary {
        converged: sol.converged,
        iterations: sol.iterations,
        final_residual: sol.residual.is_finite().then_some(sol.residual),
        kkt_residual: sol.kkt_residual,
        constraint_violation: last.metric_c,
        consensus_gap: last.metric_d,
        tracking_gap: last.metric_e,
        operator_zero_residual: operator_zero_residual(instance, &sol.state.psi),
        rel_dist_to_oracle,
    }
}

fn write_trace(path: &Path, out: &RunOutput) -> Result<(), Failure> {
    write_trace_csv(create(path)?, &out.trace).map_err(Failure::input)
}

fn exit_for(summary: &Summary) -> i32 {
    if summary.converged {
        EXIT_OK
    } else {
        eprintln!("not converged after {} iterations", summary.iterations);
        EXIT_FAILED
    }
}

pub fn cmd_run(path: &Path, args: &SolverArgs, summary_path: Option<&Path>) -> i32 {
    report((|| {
        let instance = load(path)?;
        let (opts, reference) = options(&instance, args)?;
        let out = solve(&instance, args, &opts)?;
        if let Some(t) = &args.trace {
            write_trace(t, &out)?;
        }
        let summary = summarize(&instance, &out, reference.as_ref());
        match summary_path {
            Some(p) => write_json(p, &summary)?,
            None => println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes")),
        }
        Ok(exit_for(&summary))
    })())
}

#[derive(Serialize)]
struct OracleReport {
    objective: f64,
    x: Vec<Vec<f64>>,
    multiplier: Vec<f64>,
}

pub fn cmd_oracle(path: &Path, tol: f64, out: Option<&Path>) -> i32 {
    report((|| {
        let instance = load(path)?;
        let (x, lambda) = solve_centralized(&instance, tol).map_err(Failure::failed)?;
        let blocks = instance.split(&x);
        let rep = OracleReport {
            objective: eval_objective(&instance, &blocks),
            x: blocks.iter().map(|b| b.iter().copied().collect()).collect(),
            multiplier: lambda.iter().copied().collect(),
        };
        match out {
            Some(p) => write_json(p, &rep)?,
            None => println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes")),
        }
        Ok(EXIT_OK)
    })())
}

fn bench_failure(e: BenchError) -> Failure {
    match e {
        BenchError::NonConvexBenchmark { .. } => Failure::failed(e),
        e => Failure::input(e),
    }
}

pub fn cmd_bench(config: &Path, args: &SolverArgs, out_dir: &Path) -> i32 {
    report((|| {
        let (instance, network, branches) = BenchConfig::instance_from_file(config).map_err(bench_failure)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", out_dir.display())))?;
        let (opts, reference) = options(&instance, args)?;
        let out = solve(&instance, args, &opts)?;
        write_trace(&args.trace.clone().unwrap_or_else(|| out_dir.join("trace.csv")), &out)?;
        let summary = summarize(&instance, &out, reference.as_ref());
        write_json(&out_dir.join("summary.json"), &summary)?;
        write_json(&out_dir.join("allocation.json"), &allocation(&instance, &network, &branches, &out.solution.x))?;
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        Ok(exit_for(&summary))
    })())
}
