//! GAU and affinity outputs against naive loop implementations.

mod common;

use std::time::Instant;

use common::ORACLE_TOL;

#[test]
fn gau_matches_weighted_sum() {
    let start = Instant::now();
    let worst = common::gau_oracle(200);
    assert!(worst < ORACLE_TOL, "worst deviation {worst:e}");
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn affinities_match_double_loops() {
    let worst = common::affinity_oracle(100);
    assert!(worst < ORACLE_TOL, "worst deviation {worst:e}");
}
