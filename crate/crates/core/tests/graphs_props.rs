use std::collections::BTreeSet;

use misapp::graphs::{build_graphs, compose_hops, EdgeSet};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 256,
        rng_seed: RngSeed::Fixed(0x9a),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Endpoints of all length-3 walks with distinct endpoints, ignoring
/// whether the intermediate pair is itself a self-loop.
fn raw_three_walks(e1: &EdgeSet) -> EdgeSet {
    let mut out = EdgeSet::new();
    for &(u, v) in e1 {
        for &(v2, w) in e1 {
            for &(w2, x) in e1 {
                if v == v2 && w == w2 && u != x {
                    out.insert((u, x));
                }
            }
        }
    }
    out
}

#[test]
fn composed_third_hop_differs_from_raw_walks() {
    let (a, b, c) = (1, 2, 3);
    let e1: EdgeSet = [(a, b), (b, a), (a, c)].into_iter().collect();
    let (e2, e3) = compose_hops(&e1);
    assert_eq!(e2, [(b, c)].into_iter().collect::<EdgeSet>());
    // a -> b -> a -> c is a raw walk, but its first two steps return to a
    assert!(raw_three_walks(&e1).contains(&(a, c)));
    assert!(e3.is_empty());
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn higher_hops_stay_off_diagonal(window in prop::collection::vec(0u32..6, 1..12)) {
        prop_assume!(window.iter().any(|&a| a != 0));
        let g = build_graphs(&window).unwrap();
        for hop in 1..=3 {
            for &(u, v) in g.edges(hop) {
                prop_assert!(u != v);
                prop_assert!(g.nodes.contains(&u) && g.nodes.contains(&v));
            }
        }
        prop_assert!(g.nodes.contains(&g.last_app));
        prop_assert!(!g.nodes.contains(&0));
    }

    #[test]
    fn composition_ignores_edge_order(edges in prop::collection::vec((1u32..7, 1u32..7), 0..15)) {
        let forward: EdgeSet = edges.iter().copied().filter(|(u, v)| u != v).collect();
        let mut reversed = edges.clone();
        reversed.reverse();
        let backward: EdgeSet = reversed.into_iter().filter(|(u, v)| u != v).collect();
        prop_assert_eq!(compose_hops(&forward), compose_hops(&backward));
    }

    #[test]
    fn non_isolated_nodes_touch_an_edge(window in prop::collection::vec(1u32..6, 1..10)) {
        let g = build_graphs(&window).unwrap();
        for hop in 1..=3 {
            let touched: BTreeSet<u32> = g.edges(hop).iter().flat_map(|&(u, v)| [u, v]).collect();
            prop_assert_eq!(g.non_isolated(hop), touched);
        }
    }
}
