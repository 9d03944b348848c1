//! Central-difference checks of every graph primitive and of the metric
//! loss, in double precision over several seeds.

mod common;

use casdm::metricfn::Backbone;
use common::{check_metric_loss, check_op, op_cases, FD_REL_TOL, GRAD_SEEDS};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        for seed in GRAD_SEEDS {
            let err = check_op(&case, seed).unwrap();
            if !(err <= FD_REL_TOL) {
                failures.push(format!("{} seed {seed}: rel err {err:e}", case.name));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn metric_loss_matches_finite_differences() {
    for backbone in [Backbone::LpipsAvgpool, Backbone::PlainCnn] {
        for seed in GRAD_SEEDS {
            let err = check_metric_loss(backbone.clone(), seed).unwrap();
            assert!(err <= FD_REL_TOL, "{backbone} seed {seed}: rel err {err:e}");
        }
    }
}
