mod common;

use aggsplit::bench::{generate_instance, grid_network, BenchParams, BranchSpec, LengthRule};
use aggsplit::engine::{run, Layout, RunOptions};
use aggsplit::oracle::{assemble_centralized, decompose, decomposed_kkt_check, kkt_check, operator_zero_residual, solve_centralized};
use aggsplit::problem::io::load_instance;
use aggsplit::problem::{aggregate, eval_objective, ProblemInstance};
use common::*;
use nalgebra::{DMatrix, DVector};

const TOL: f64 = 1e-8;

/// Hessian and gradient of `eval_objective` by polarization; exact for quadratics up to rounding.
fn polarized(inst: &ProblemInstance) -> (DMatrix<f64>, DVector<f64>) {
    let n = inst.total_dim();
    let f = |x: &DVector<f64>| eval_objective(inst, &inst.split(x));
    let unit = |k: usize| DVector::from_fn(n, |r, _| if r == k { 1.0 } else { 0.0 });
    let f0 = f(&DVector::zeros(n));
    let fk: Vec<f64> = (0..n).map(|k| f(&unit(k))).collect();
    let h = DMatrix::from_fn(n, n, |p, q| f(&(unit(p) + unit(q))) - fk[p] - fk[q] + f0);
    let g = DVector::from_fn(n, |k, _| fk[k] - f0 - 0.5 * h[(k, k)]);
    (h, g)
}

/// All constraints of the coupled problem, written out from the instance data.
fn coupled_polytope(inst: &ProblemInstance) -> Polytope {
    let n = inst.total_dim();
    let offs = inst.offsets();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for (i, a) in inst.agents().iter().enumerate() {
        let fs = &a.feasible_set;
        lo.rows_mut(offs[i], a.n()).copy_from(&fs.lower);
        hi.rows_mut(offs[i], a.n()).copy_from(&fs.upper);
        for r in 0..fs.g.nrows() {
            // G x >= h  as  -G x <= -h
            let mut row = DVector::zeros(n);
            for c in 0..a.n() {
                row[offs[i] + c] = -fs.g[(r, c)];
            }
            rows.push((row, -fs.h[r]));
        }
    }
    for k in 0..inst.l() {
        let mut row = DVector::zeros(n);
        for (i, a) in inst.agents().iter().enumerate() {
            for c in 0..a.n() {
                row[offs[i] + c] = a.coupling[(k, c)];
            }
        }
        rows.push((row, inst.capacity()[k]));
    }
    let c = DMatrix::from_fn(rows.len(), n, |r, col| rows[r].0[col]);
    let d = DVector::from_fn(rows.len(), |r, _| rows[r].1);
    Polytope { lo, hi, c, d }
}

fn small_benchmark() -> ProblemInstance {
    let net = grid_network(2, 2, LengthRule::Random(3));
    let branches = vec![
        BranchSpec { factories: vec![0], capacities: vec![11.0] },
        BranchSpec { factories: vec![3], capacities: vec![12.5] },
    ];
    generate_instance(&net, &branches, &BenchParams { seed: 2, ..BenchParams::default() }).unwrap()
}

#[test]
fn small_benchmark_matches_projected_gradient() {
    let inst = small_benchmark();
    let (x_star, lambda) = solve_centralized(&inst, 1e-12).unwrap();
    let (h, g) = polarized(&inst);
    let poly = coupled_polytope(&inst);
    let x_pg = projected_gradient(&h, &g, &poly, 100_000, 1e-12);
    let err = (&x_star - &x_pg).amax();
    assert!(poly.violation(&x_pg) < 1e-10);
    assert!(err <= 1e-6, "{err:e}");
    assert!(kkt_check(&inst, &inst.split(&x_star), &lambda) <= 1e-8);
}

#[test]
fn substituted_objective_matches_assembled_qp() {
    let inst = small_benchmark();
    let qp = assemble_centralized(&inst);
    let mut r = rng(9);
    for _ in 0..100 {
        let x = random_vector(&mut r, inst.total_dim(), 5.0);
        let direct = eval_objective(&inst, &inst.split(&x));
        let assembled = qp.problem.objective(&x) + qp.constant;
        assert!((direct - assembled).abs() <= 1e-10 * direct.abs().max(1.0), "{direct} vs {assembled}");
    }
    for seed in 0..10 {
        let inst = random_instance(900 + seed, 5, 3, 2);
        let qp = assemble_centralized(&inst);
        let x = random_vector(&mut r, inst.total_dim(), 2.0);
        let direct = eval_objective(&inst, &inst.split(&x));
        assert!((direct - qp.problem.objective(&x) - qp.constant).abs() <= 1e-10 * direct.abs().max(1.0));
    }
}

#[test]
fn oracle_round_trips_through_the_decomposition() {
    for seed in 0..20 {
        let inst = random_instance(1_100 + seed, 5, 3, 2);
        let (x, lambda) = solve_centralized(&inst, 1e-12).unwrap();
        let xs = inst.split(&x);
        assert!(kkt_check(&inst, &xs, &lambda) <= 1e-8, "seed {seed}");
        let res = decomposed_kkt_check(&inst, &decompose(&inst, &xs, &lambda));
        assert!(res <= 1e-7, "seed {seed}: {res:e}");
    }
}

fn converged(inst: &ProblemInstance) -> aggsplit::engine::RunOutput {
    run(inst, &RunOptions { max_iter: 100_000, tol: TOL, wall_clock: false, ..RunOptions::default() }).unwrap()
}

fn check_zero(inst: &ProblemInstance) {
    let out = converged(inst);
    let psi = &out.solution.state.psi;
    assert!(operator_zero_residual(inst, psi) <= 100.0 * TOL);
    assert!(kkt_check(inst, &out.solution.x, &out.solution.multiplier) <= 100.0 * TOL);
    let lay = Layout::new(inst);
    let g = inst.graph();
    for e in 0..g.n_edges() {
        let tail = g.edge(e).0;
        let gap = (psi.rows(lay.y_est(e).start, inst.l()) - psi.rows(lay.y(tail).start, inst.l())).amax();
        assert!(gap <= 10.0 * TOL, "edge {e}: {gap:e}");
    }
    for i in 0..inst.n_agents() {
        let gap = (psi.rows(lay.sigma(i).start, inst.l()) - aggregate(inst, &out.solution.x, i)).amax();
        assert!(gap <= 10.0 * TOL, "agent {i}: {gap:e}");
    }
}

#[test]
fn converged_runs_are_operator_zeros() {
    check_zero(&load_instance(manifest_path("data/two_agent.json")).unwrap());
    check_zero(&random_instance(31, 3, 2, 1));
}

#[test]
fn generic_points_are_not_zeros() {
    for seed in 0..10 {
        let inst = random_instance(1_200 + seed, 4, 3, 2);
        let psi = random_vector(&mut rng(seed), Layout::new(&inst).dim(), 1.0);
        assert!(operator_zero_residual(&inst, &psi) > 1e-3);
    }
}
