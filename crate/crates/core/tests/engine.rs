mod common;

use aggsplit::engine::{
    build_design_matrix, choose_step_sizes, compute_metrics, run, run_lenient, Engine, GammaSchedule, IterateState, Layout, RunOptions,
};
use aggsplit::oracle::solve_centralized;
use aggsplit::problem::io::load_instance;
use aggsplit::problem::{two_agent_instance, ProblemInstance};
use common::*;
use nalgebra::{DVector, SymmetricEigen};
use proptest::prelude::*;

const TOL: f64 = 1e-8;

fn two_agent() -> ProblemInstance {
    load_instance(manifest_path("data/two_agent.json")).unwrap()
}

fn quiet(max_iter: usize) -> RunOptions {
    RunOptions { max_iter, tol: TOL, wall_clock: false, ..RunOptions::default() }
}

#[test]
fn converged_point_is_fixed() {
    let inst = random_instance(11, 4, 2, 2);
    let out = run(&inst, &RunOptions { tol: 1e-12, ..quiet(200_000) }).unwrap();
    let steps = out.steps.clone();
    let engine = Engine::new(&inst, steps).unwrap();
    let mut state = out.solution.state.clone();
    let before = state.tilde.clone();
    engine.dr_step(&mut state, out.solution.iterations).unwrap();
    assert!((&state.tilde - before).norm() <= 1e-7);
}

#[test]
fn single_step_matches_dense_resolvents() {
    let inst = two_agent();
    let steps = choose_step_sizes(&inst, 0.5);
    let engine = Engine::new(&inst, steps.clone()).unwrap();
    let mut state = IterateState::zeros(engine.layout());
    let t0 = state.tilde.clone();
    engine.dr_step(&mut state, 0).unwrap();
    assert!(inclusion_residual_a(&inst, &steps, &t0, &state.psi) <= 1e-8);
    let hat = &state.psi * 2.0 - &t0;
    assert!((&hat - &state.hat).amax() <= 1e-15);
    assert!(inclusion_residual_b(&inst, &steps, &hat, &state.bar) <= 1e-8);
    let expected = &t0 + (&state.bar - &state.psi) * (2.0 * steps.gamma.at(0));
    assert!((expected - &state.tilde).amax() <= 1e-15);
}

#[test]
fn half_relaxation_is_the_classical_operator() {
    for seed in 0..10 {
        let inst = random_instance(600 + seed, 4, 3, 2);
        let steps = choose_step_sizes(&inst, 0.5).with_gamma(GammaSchedule::Constant(0.5));
        let engine = Engine::new(&inst, steps).unwrap();
        let lay = engine.layout().clone();
        let t = random_vector(&mut rng(seed), lay.dim(), 2.0);
        let mut st = IterateState::from_tilde(&lay, t.clone());
        engine.resolvent_a(&mut st);
        let ra = &st.psi * 2.0 - &t;
        let mut sb = IterateState::zeros(&lay);
        sb.hat = ra.clone();
        engine.resolvent_b(&mut sb).unwrap();
        let rb = &sb.bar * 2.0 - &ra;
        let classical = (&t + rb) * 0.5;
        let mut step = IterateState::from_tilde(&lay, t);
        engine.dr_step(&mut step, 0).unwrap();
        assert!((step.tilde - classical).amax() <= 1e-9, "seed {seed}");
    }
}

fn fejer_gaps(inst: &ProblemInstance, steps_taken: usize) -> f64 {
    let steps = choose_step_sizes(inst, 0.5);
    let engine = Engine::new(inst, steps.clone()).unwrap();
    let phi = build_design_matrix(inst, &steps).unwrap();
    let mut state = IterateState::zeros(engine.layout());
    let mut path = vec![state.tilde.clone()];
    for k in 0..steps_taken {
        engine.dr_step(&mut state, k).unwrap();
        path.push(state.tilde.clone());
    }
    for k in steps_taken..steps_taken * 20 {
        engine.dr_step(&mut state, k).unwrap();
    }
    let limit = state.tilde;
    let dist: Vec<f64> = path.iter().map(|t| phi_inner(&phi, &(t - &limit), &(t - &limit)).sqrt()).collect();
    dist.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn phi_distance_to_the_limit_never_grows() {
    assert!(fejer_gaps(&two_agent(), 40) <= 1e-9);
    for seed in 0..3 {
        let worst = fejer_gaps(&random_instance(700 + seed, 3, 2, 1), 300);
        assert!(worst <= 1e-9, "seed {seed}: {worst:e}");
    }
}

#[test]
fn converged_two_agent_run_meets_the_metric_bounds() {
    let inst = two_agent();
    let out = run(&inst, &quiet(5_000)).unwrap();
    let last = out.trace.last().unwrap();
    assert!(last.metric_c <= 10.0 * TOL);
    assert!(last.metric_d <= 10.0 * TOL);
    assert!(last.metric_e <= 10.0 * TOL);
    assert!(out.solution.kkt_residual <= 100.0 * TOL);
}

#[test]
fn desk_benchmark_reaches_the_oracle() {
    let (inst, _, _) = aggsplit::bench::BenchConfig::instance_from_file(manifest_path("data/grid3x3.json")).unwrap();
    let (x_star, _) = solve_centralized(&inst, 1e-12).unwrap();
    let out = run(&inst, &quiet(20_000)).unwrap();
    let rel = (out.x_stacked(&inst) - &x_star).norm() / x_star.norm();
    assert!(rel <= 1e-3, "{rel:e}");
}

#[test]
fn trace_length_equals_iterations() {
    let inst = two_agent_instance(1.0).unwrap();
    let out = run_lenient(&inst, &quiet(25)).unwrap();
    assert!(!out.solution.converged);
    assert_eq!(out.trace.len(), 25);
    assert_eq!(out.solution.iterations, 25);
}

fn direct_metrics(inst: &ProblemInstance, lay: &Layout, prev: &DVector<f64>, next: &DVector<f64>) -> [f64; 5] {
    let n = inst.n_agents();
    let nf = n as f64;
    let part = |v: &DVector<f64>, r: std::ops::Range<usize>| v.rows(r.start, r.len()).into_owned();
    let rel = |a: DVector<f64>, b: DVector<f64>| (&b - &a).norm() / a.norm().max(1e-12);
    let a = (0..n).map(|i| rel(part(prev, lay.x(i)), part(next, lay.x(i)))).sum::<f64>() / nf;
    let b = (0..n).map(|i| rel(part(prev, lay.y(i)), part(next, lay.y(i)))).sum::<f64>() / nf;
    let ax: Vec<DVector<f64>> = (0..n).map(|i| &inst.agent(i).coupling * part(next, lay.x(i))).collect();
    let mut total = DVector::zeros(inst.l());
    for v in &ax {
        total += v;
    }
    let c = (&total - inst.capacity()).map(|v| v.max(0.0)).norm();
    let g = inst.graph();
    let d = (0..g.n_edges()).map(|e| (part(next, lay.y_est(e)) - part(next, lay.y(g.edge(e).0))).norm()).sum::<f64>() / g.n_edges() as f64;
    let e = (0..n).map(|i| (part(next, lay.sigma(i)) - (&total - &ax[i])).norm()).sum::<f64>() / nf;
    [a, b, c, d, e]
}

#[test]
fn metrics_match_direct_recomputation() {
    for seed in 0..10 {
        let inst = random_instance(800 + seed, 5, 3, 2);
        let lay = Layout::new(&inst);
        let mut r = rng(seed);
        let prev = random_vector(&mut r, lay.dim(), 2.0);
        let next = random_vector(&mut r, lay.dim(), 2.0);
        let rec = compute_metrics(0, &prev, &next, &inst, &lay, None, 0.0, 0.0);
        let got = [rec.metric_a, rec.metric_b, rec.metric_c, rec.metric_d, rec.metric_e];
        for (g, w) in got.iter().zip(direct_metrics(&inst, &lay, &prev, &next)) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "seed {seed}: {g} vs {w}");
        }
    }
}

#[test]
fn consistent_state_has_zero_gaps() {
    let inst = random_instance(5, 4, 2, 2);
    let lay = Layout::new(&inst);
    let mut psi = DVector::zeros(lay.dim());
    // x = 0 is feasible since c > 0; equal y everywhere gives perfect consensus
    let y = DVector::from_element(inst.l(), 0.7);
    for i in 0..inst.n_agents() {
        psi.rows_mut(lay.y(i).start, inst.l()).copy_from(&y);
    }
    for e in 0..inst.graph().n_edges() {
        psi.rows_mut(lay.y_est(e).start, inst.l()).copy_from(&y);
    }
    let rec = compute_metrics(0, &psi, &psi, &inst, &lay, None, 0.0, 0.0);
    assert_eq!((rec.metric_c, rec.metric_d, rec.metric_e), (0.0, 0.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn design_matrix_is_symmetric_positive_definite(seed in 0u64..100_000, safety in 0.05f64..0.95) {
        let inst = random_instance(seed, 6, 3, 3);
        let phi = build_design_matrix(&inst, &choose_step_sizes(&inst, safety)).unwrap();
        prop_assert_eq!(&phi, &phi.transpose());
        prop_assert!(SymmetricEigen::new(phi).eigenvalues.min() > 0.0);
    }

    #[test]
    fn zero_relaxation_freezes_tilde(seed in 0u64..100_000) {
        let inst = random_instance(seed, 4, 2, 2);
        let steps = choose_step_sizes(&inst, 0.5).with_gamma(GammaSchedule::Constant(0.0));
        let engine = Engine::new(&inst, steps).unwrap();
        let t = random_vector(&mut rng(seed), engine.layout().dim(), 1.0);
        let mut st = IterateState::from_tilde(engine.layout(), t.clone());
        engine.dr_step(&mut st, 0).unwrap();
        prop_assert_eq!(st.tilde, t);
    }
}
