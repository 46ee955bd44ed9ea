mod common;

use common::{coarsening_oracle, model_gradients, op_gradients, permutation_gap, PERMUTATION_KINDS};

#[test]
fn every_op_matches_central_differences() {
    let results = op_gradients();
    let bad: Vec<_> = results.iter().filter(|r| !r.ok()).map(|r| (&r.name, r.error)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn every_model_matches_central_differences() {
    let results = model_gradients();
    assert!(results.len() >= 10);
    let bad: Vec<_> = results.iter().filter(|r| !r.ok()).map(|r| (&r.name, r.error)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn coarsening_agrees_with_the_elementwise_definition() {
    let out = coarsening_oracle();
    assert!(out.partitions > 800);
    assert_eq!(out.mismatches, 0);
}

#[test]
fn graph_models_are_permutation_equivariant() {
    for kind in PERMUTATION_KINDS {
        let gap = permutation_gap(kind, 1, 3);
        assert!(gap <= 1e-9, "{} gap {gap:e}", kind.name());
    }
}
