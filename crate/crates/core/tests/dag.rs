mod common;

use layervid::video_io::{min_layers_for_dag, min_layers_for_labeled};
use layervid::Error;
use proptest::prelude::*;

#[test]
fn matches_exhaustive_longest_path_up_to_six_nodes() {
    let checked = common::exhaustive_dag_check(6).unwrap();
    // Sum over n of 2^(n choose 2).
    assert_eq!(checked, 1 + 1 + 2 + 8 + 64 + 1024 + 32768);
}

#[test]
fn names_are_order_independent() {
    let edges = [("fish", "sand"), ("diver", "fish"), ("diver", "sand")];
    let reversed: Vec<_> = edges.iter().rev().cloned().collect();
    assert_eq!(min_layers_for_labeled(&[], &edges).unwrap(), 3);
    assert_eq!(min_layers_for_labeled(&["bubble"], &reversed).unwrap(), 3);
}

#[test]
fn out_of_range_edge_is_rejected() {
    assert!(matches!(min_layers_for_dag(2, &[(0, 2)]), Err(Error::InvalidInput(_))));
}

proptest! {
    // A back edge along a path of length ≥ 2 always closes a cycle.
    #[test]
    fn back_edge_on_a_chain_is_a_cycle(n in 2usize..8, a in 0usize..8, b in 0usize..8) {
        let (lo, hi) = (a.min(b) % n, a.max(b) % n);
        prop_assume!(lo < hi);
        let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        prop_assert_eq!(min_layers_for_dag(n, &edges).unwrap(), n);
        edges.push((hi, lo));
        match min_layers_for_dag(n, &edges) {
            Err(Error::Cycle(c)) => {
                prop_assert_eq!(c.first(), c.last());
                prop_assert_eq!(c.len(), hi - lo + 2);
            }
            other => prop_assert!(false, "expected a cycle, got {:?}", other),
        }
    }
}
