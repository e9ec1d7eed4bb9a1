mod common;

use common::gradcheck::{check_kd, check_layer, layer_cases, KD_CASES};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_layer_matches_finite_differences() {
    let cases = layer_cases();
    assert!(cases.len() >= 20);
    for (i, case) in cases.iter().enumerate() {
        let err = check_layer(case, 100 + i as u64);
        assert!(err < TOLERANCE, "{}: relative error {err:e}", case.label);
    }
}

#[test]
fn kd_loss_matches_finite_differences() {
    for (i, &(b, c, alpha, tau)) in KD_CASES.iter().enumerate() {
        let err = check_kd(b, c, alpha, tau, 7 + i as u64);
        assert!(err < TOLERANCE, "kd {b}x{c} alpha {alpha} tau {tau}: relative error {err:e}");
    }
}
