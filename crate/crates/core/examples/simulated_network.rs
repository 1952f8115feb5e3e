//! Runs the iteration as message-passing entities and audits who talked to whom.

use aggsplit::bench::{generate_instance, BenchConfig};
use aggsplit::engine::{choose_step_sizes, Engine, IterateState};
use aggsplit::sim::{locality_audit, spawn_topology, EntityKind};

fn main() {
    let (network, branches, params) = BenchConfig::desk_default().materialize(None).expect("config");
    let instance = generate_instance(&network, &branches, &params).expect("instance");
    let steps = choose_step_sizes(&instance, 0.5);

    let mut world = spawn_topology(&instance, steps.clone()).expect("topology");
    for id in 0..world.n_entities() {
        let kind = match world.kind(id) {
            EntityKind::Agent => "agent",
            EntityKind::EdgeArbitrator => "edge",
        };
        println!("entity {id} ({kind}) talks to {:?}", world.neighbors(id));
    }
    for a in world.agents() {
        println!("agent {} holds {} numbers", a.id, a.state_size());
    }

    let engine = Engine::new(&instance, steps).expect("engine");
    let layout = engine.layout().clone();
    let mut state = IterateState::zeros(&layout);
    world.load_tilde(&layout, &state.tilde);
    for k in 0..100 {
        engine.dr_step(&mut state, k).expect("step");
        world.run_round(k).expect("round");
    }
    println!("identical to the monolithic engine: {}", world.gather(&layout).tilde == state.tilde);

    let report = locality_audit(&mut world, 5).expect("audit");
    println!("messages per round {:?}, non-incident messages {}", report.messages_per_round, report.violations.len());
}
