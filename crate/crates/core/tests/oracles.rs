mod support;

use support::*;

#[test]
fn conv2d_matches_sliding_window() {
    assert!(conv2d_error(30, 1) < 1e-12);
}

#[test]
fn attention_matches_per_line_loop() {
    assert!(attention_error(30, 2) < 1e-12);
}

#[test]
fn consistency_targets_match_pairwise_comparison() {
    assert!(consistency_error(40, 3) < 1e-15);
}

#[test]
fn lovasz_matches_enumeration() {
    assert!(lovasz_error(30, 4) < 1e-12);
}

#[test]
fn lovasz_on_hard_predictions_is_one_minus_iou() {
    assert_eq!(lovasz_hard_error(200, 5), 0.0);
}

#[test]
fn cross_entropy_matches_per_pixel_loop() {
    assert!(cross_entropy_error(30, 6) < 1e-12);
}

#[test]
fn metrics_match_direct_formulas() {
    let (err, identity) = metrics_error(100, 7);
    assert!(err < 1e-12 && identity < 1e-12, "{err} {identity}");
}

#[test]
fn hand_evaluated_losses() {
    let (got, want) = worked_example();
    assert!((got - want).abs() < 1e-15);
    let (got, want) = weighted_total();
    assert!((got - want).abs() < 1e-12);
}
