//! Centralized reference solve and the optimality checks built on it.

use aggsplit::engine::{run, RunOptions};
use aggsplit::oracle::{decompose, decomposed_kkt_check, kkt_check, operator_zero_residual, solve_centralized};
use aggsplit::problem::two_agent_instance;

fn main() {
    let instance = two_agent_instance(1.0).expect("valid instance");
    let (x, lambda) = solve_centralized(&instance, 1e-12).expect("oracle");
    let xs = instance.split(&x);
    println!("oracle x = {:?}, multiplier = {:?}", x.as_slice(), lambda.as_slice());
    println!("kkt residual            {:.2e}", kkt_check(&instance, &xs, &lambda));
    println!("decomposed residual     {:.2e}", decomposed_kkt_check(&instance, &decompose(&instance, &xs, &lambda)));

    let out = run(&instance, &RunOptions { wall_clock: false, ..RunOptions::default() }).expect("converges");
    let psi = &out.solution.state.psi;
    println!("operator residual (DR)  {:.2e}", operator_zero_residual(&instance, psi));
    println!("kkt residual (DR)       {:.2e}", kkt_check(&instance, &out.solution.x, &out.solution.multiplier));
    println!("distance to oracle      {:.2e}", (out.x_stacked(&instance) - &x).norm());
}
