//! One iteration taken apart: step sizes, design matrix, both resolvents and the relaxation.

use aggsplit::engine::{build_design_matrix, choose_step_sizes, Engine, IterateState};
use aggsplit::problem::two_agent_instance;
use aggsplit::resolvents::{km_update, reflect};
use nalgebra::SymmetricEigen;

fn main() {
    let instance = two_agent_instance(1.0).expect("valid instance");
    let steps = choose_step_sizes(&instance, 0.5);
    println!("tau1 {:?} tau2 {:?} tau3 {:?} tau4 {:?}", steps.tau1, steps.tau2, steps.tau3, steps.tau4);
    let phi = build_design_matrix(&instance, &steps).expect("design matrix");
    println!("smallest eigenvalue of the design matrix: {:.4}", SymmetricEigen::new(phi).eigenvalues.min());

    let engine = Engine::new(&instance, steps.clone()).expect("engine");
    let mut state = IterateState::zeros(engine.layout());
    engine.resolvent_a(&mut state);
    reflect(state.psi.as_slice(), state.tilde.as_slice(), state.hat.as_mut_slice());
    engine.resolvent_b(&mut state).expect("projection");
    let before = state.tilde.clone();
    km_update(state.tilde.as_mut_slice(), state.psi.as_slice(), state.bar.as_slice(), steps.gamma.at(0));
    println!("psi   {:?}", state.psi.as_slice());
    println!("bar   {:?}", state.bar.as_slice());
    println!("tilde moved by {:.3e}", (&state.tilde - before).norm());
}
