//! Desk-scale commodity benchmark: 3 × 3 grid, three branches.

use aggsplit::bench::{allocation, generate_instance, BenchConfig};
use aggsplit::engine::{run_lenient, RunOptions};
use aggsplit::oracle::solve_centralized;

fn main() {
    let (network, branches, params) = BenchConfig::desk_default().materialize(None).expect("config");
    let instance = generate_instance(&network, &branches, &params).expect("instance");
    let (x_star, _) = solve_centralized(&instance, 1e-12).expect("oracle");
    let opts = RunOptions { x_star: Some(x_star.clone()), wall_clock: false, ..RunOptions::default() };
    let out = run_lenient(&instance, &opts).expect("run");

    for r in out.trace.iter().step_by(50) {
        println!(
            "k={:4}  c={:.2e}  d={:.2e}  e={:.2e}  f={:.2e}",
            r.k,
            r.metric_c,
            r.metric_d,
            r.metric_e,
            r.metric_f.unwrap_or(f64::NAN)
        );
    }
    let alloc = allocation(&instance, &network, &branches, &out.solution.x);
    for (i, b) in alloc.branches.iter().enumerate() {
        println!("branch {i}: factories {:?} produce {:?}", b.factories, b.production);
    }
    println!("market totals {:?}", alloc.market_totals);
    println!("converged {} after {} iterations", out.solution.converged, out.solution.iterations);
}
