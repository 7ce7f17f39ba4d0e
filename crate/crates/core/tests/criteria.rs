mod common;

use common::*;

fn check(o: Outcome) {
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn object_mask_matches_oracle() {
    check(mask_oracle(500, 11));
}

#[test]
fn unblocked_oga_is_plain_attention() {
    check(oga_reduction(50, 12));
}

#[test]
fn groups_do_not_see_each_other() {
    check(group_isolation(50, 13));
}

#[test]
fn model_gradient_matches_finite_differences() {
    check(model_gradient());
}

#[test]
fn stream_drop_keeps_expectation() {
    check(stream_drop_stats(10_000, 15));
}

#[test]
fn loss_reference_values() {
    check(loss_checks(16));
}

#[test]
fn metrics_match_oracles() {
    check(metric_oracles(200, 17));
}

#[test]
fn runs_are_reproducible() {
    check(determinism());
}
