use coagent::env::{FourRoomsEnv, N_CELLS, N_DIRECTIONS};
use coagent::graph::{
    build_graph, validate_graph, CoagentGraph, CoagentId, CoagentKind, GraphError, PathRecorder, StepAction,
};
use coagent::learner::TabularLearner;
use coagent::option_net::{Hyperparams, NetworkLayout, NetworkSpec, Topology};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn pi(o: usize) -> CoagentId {
    CoagentId::policy(o)
}

fn beta(o: usize) -> CoagentId {
    CoagentId::termination(o)
}

/// Two mirrored trees: policies point down, terminations point up, every
/// termination hands control to its own policy, leaves close the loop.
fn tree_edges(parent_of: &[(usize, usize)], n: usize, leaves: &[usize]) -> BTreeSet<(CoagentId, CoagentId)> {
    let mut e = BTreeSet::new();
    for &(p, c) in parent_of {
        e.insert((pi(p), pi(c)));
        e.insert((beta(c), beta(p)));
    }
    for o in 0..n {
        e.insert((beta(o), pi(o)));
    }
    for &l in leaves {
        e.insert((pi(l), beta(l)));
    }
    e
}

#[test]
fn hoc_three_levels_binary_forms_two_mirrored_trees() {
    let spec = NetworkSpec::new(Topology::Hoc, &[1, 2, 2], N_DIRECTIONS);
    let g = build_graph(&spec).unwrap();
    assert_eq!(g.vertices.len(), 14);
    let expected = tree_edges(&[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)], 7, &[3, 4, 5, 6]);
    assert_eq!(g.edges, expected);
    assert_eq!(validate_graph(&g, &spec), Ok(()));
}

#[test]
fn contraction_gives_doubled_tree_with_self_loops() {
    let g = build_graph(&NetworkSpec::new(Topology::Hoc, &[1, 2, 2], N_DIRECTIONS)).unwrap();
    let mut expected = BTreeSet::new();
    for (p, c) in [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)] {
        expected.insert((p, c));
        expected.insert((c, p));
    }
    for o in 0..7 {
        expected.insert((o, o));
    }
    assert_eq!(g.contract_options(), expected);
}

#[test]
fn single_option_network() {
    let spec = NetworkSpec::new(Topology::Fon, &[1], N_DIRECTIONS);
    let g = build_graph(&spec).unwrap();
    assert_eq!(g.vertices, BTreeSet::from([pi(0), beta(0)]));
    assert_eq!(g.edges, BTreeSet::from([(pi(0), beta(0)), (beta(0), pi(0))]));
    assert_eq!(validate_graph(&g, &spec), Ok(()));
}

#[test]
fn fon_one_one_has_four_vertices() {
    let spec = NetworkSpec::new(Topology::Fon, &[1, 1], N_DIRECTIONS);
    let g = build_graph(&spec).unwrap();
    assert_eq!(g.vertices.len(), 4);
    assert_eq!(g.edges, tree_edges(&[(0, 1)], 2, &[1]));
    assert_eq!(validate_graph(&g, &spec), Ok(()));
}

#[test]
fn two_layer_fon_and_hoc_coincide() {
    for m in [2, 3] {
        let fon = build_graph(&NetworkSpec::new(Topology::Fon, &[1, m], N_DIRECTIONS)).unwrap();
        let hoc = build_graph(&NetworkSpec::new(Topology::Hoc, &[1, m], N_DIRECTIONS)).unwrap();
        assert_eq!(fon, hoc);
    }
}

#[test]
fn fon_connects_adjacent_layers_completely() {
    let spec = NetworkSpec::new(Topology::Fon, &[1, 2, 3], N_DIRECTIONS);
    let g = build_graph(&spec).unwrap();
    // layer 1 = {1, 2}, layer 2 = {3, 4, 5}
    let mut links = vec![(0, 1), (0, 2)];
    for p in [1, 2] {
        for c in [3, 4, 5] {
            links.push((p, c));
        }
    }
    assert_eq!(g.edges, tree_edges(&links, 6, &[3, 4, 5]));
    assert_eq!(validate_graph(&g, &spec), Ok(()));
}

#[test]
fn validation_rejects_broken_graphs() {
    let spec = NetworkSpec::new(Topology::Hoc, &[1, 2], N_DIRECTIONS);
    let mut g = build_graph(&spec).unwrap();
    g.edges.retain(|&(a, b)| !(a == beta(2) || b == beta(2)));
    assert_eq!(validate_graph(&g, &spec), Err(GraphError::Unreachable(beta(2))));

    let mut g = build_graph(&spec).unwrap();
    g.edges.remove(&(pi(1), beta(1)));
    assert!(validate_graph(&g, &spec).is_err());

    assert_eq!(
        build_graph(&NetworkSpec::new(Topology::Hoc, &[], N_DIRECTIONS)),
        Err(GraphError::NoLayers)
    );
}

#[test]
fn dot_export_lists_edges() {
    let spec = NetworkSpec::new(Topology::Hoc, &[1, 2], N_DIRECTIONS);
    let g = build_graph(&spec).unwrap();
    let dot = g.to_dot(&NetworkLayout::build(&spec).unwrap());
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("->").count(), g.edges.len());
}

/// Up-phase of terminations (all but the last say "terminate"), then a down-phase
/// of policies ending in the primitive action.
fn assert_two_phases(path: &[coagent::graph::ExecutionStep]) {
    let ups = path
        .iter()
        .take_while(|s| s.coagent.kind == CoagentKind::Termination)
        .count();
    assert!(ups < path.len());
    for (i, s) in path[..ups].iter().enumerate() {
        assert_eq!(s.action, StepAction::Terminate(i + 1 != ups), "{path:?}");
    }
    for s in &path[ups..path.len() - 1] {
        assert_eq!(s.coagent.kind, CoagentKind::Policy);
        assert!(matches!(s.action, StepAction::Child(_)));
    }
    assert!(matches!(path.last().unwrap().action, StepAction::Primitive(_)));
}

fn replay(spec: &NetworkSpec, graph: &CoagentGraph) {
    let hyper = Hyperparams::default();
    let mut learner = TabularLearner::new(spec, N_CELLS, hyper).unwrap();
    let mut env = FourRoomsEnv::new(ChaCha8Rng::seed_from_u64(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut rec = PathRecorder::default();
        let stats = learner.learn_episode_traced(&mut env, 2000, &mut rng, &mut rec);
        let paths = rec.take_paths();
        assert_eq!(paths.len(), stats.steps);
        assert_eq!(paths[0].steps[0].coagent, pi(0));
        for (k, path) in paths.iter().enumerate() {
            assert!(graph.admits(&path.steps), "path {k} leaves the graph: {path:?}");
            assert_two_phases(&path.steps);
            if k > 0 {
                let prev = paths[k - 1].steps.last().unwrap().coagent;
                assert!(graph.has_edge(prev, path.steps[0].coagent));
            }
        }
    }
}

#[test]
fn simulated_paths_follow_graph_edges() {
    for spec in [
        NetworkSpec::new(Topology::Hoc, &[1, 2, 2], N_DIRECTIONS),
        NetworkSpec::new(Topology::Fon, &[1, 2, 2], N_DIRECTIONS),
        NetworkSpec::new(Topology::Fon, &[1, 1, 1], N_DIRECTIONS),
    ] {
        replay(&spec, &build_graph(&spec).unwrap());
    }
}
