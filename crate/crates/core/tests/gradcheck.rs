//! Finite-difference checks of every differentiable operator and of the full
//! model loss, in f64.

mod common;

use common::{MODEL_TOL, OP_TOL};

#[test]
fn every_operator_matches_central_differences() {
    let errors = common::operator_errors();
    assert!(errors.len() >= 30);
    for (name, e) in errors {
        assert!(e < OP_TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn end_to_end_model_loss() {
    let r = common::end_to_end();
    assert!(r.covers_high_order);
    assert!(r.error < MODEL_TOL, "end-to-end relative error {:e} over {} tensors", r.error, r.tensors);
}
