//! Solves the two-agent capacity split and prints the trace tail.

use aggsplit::engine::{run, RunOptions};
use aggsplit::problem::two_agent_instance;

fn main() {
    let instance = two_agent_instance(1.0).expect("valid instance");
    let out = run(&instance, &RunOptions { wall_clock: false, ..RunOptions::default() }).expect("converges");
    for r in out.trace.iter().rev().take(3).rev() {
        println!("k={:4}  residual={:.3e}  violation={:.3e}", r.k, r.operator_residual, r.metric_c);
    }
    let s = &out.solution;
    println!("x = ({:.6}, {:.6}), multiplier = {:.6}", s.x[0][0], s.x[1][0], s.multiplier[0]);
    println!("{} iterations, kkt residual {:.2e}", s.iterations, s.kkt_residual);
}
