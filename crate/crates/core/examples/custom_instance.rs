//! Builds an instance in code, round-trips it through JSON and shows validation errors.

use aggsplit::problem::io::{instance_to_json, parse_instance};
use aggsplit::problem::{build_problem, AgentSpec, CommGraph, LocalFeasibleSet, QuadraticObjective, WeightRule};
use nalgebra::{DMatrix, DVector};

fn agent(target: f64, weight: f64) -> AgentSpec {
    // weight · ‖x − target‖² over z = [x; σ] with two decisions and one shared row
    let mut h = DMatrix::zeros(3, 3);
    h[(0, 0)] = 2.0 * weight;
    h[(1, 1)] = 2.0 * weight;
    let g = DVector::from_vec(vec![-2.0 * weight * target, -2.0 * weight * target, 0.0]);
    let set = LocalFeasibleSet::boxed(DVector::zeros(2), DVector::from_element(2, 4.0));
    AgentSpec::new(QuadraticObjective::new(h, g, 2.0 * weight * target * target), set, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
}

fn main() {
    let agents = || vec![agent(1.0, 1.0), agent(2.0, 0.5), agent(3.0, 2.0)];
    let ring = || CommGraph::new(3, vec![(0, 1), (1, 2), (2, 0)], WeightRule::Uniform(1.0));

    let instance = build_problem(agents(), DVector::from_vec(vec![6.0]), ring().expect("graph")).expect("valid");
    let text = instance_to_json(&instance);
    let again = parse_instance(&text).expect("parses").build().expect("valid");
    println!("round trip keeps {} agents, {} edges", again.n_agents(), again.graph().n_edges());

    match build_problem(agents(), DVector::from_vec(vec![-1.0]), ring().expect("graph")) {
        Err(e) => println!("negative capacity: {e}"),
        Ok(_) => unreachable!(),
    }
    match CommGraph::new(3, vec![(0, 1), (1, 0)], WeightRule::Uniform(1.0)) {
        Err(e) => println!("partial graph: {e}"),
        Ok(_) => unreachable!(),
    }
}
