use stitchlab_core::nn::{gradient_suite, GRAD_TOLERANCE};

#[test]
fn every_component_matches_finite_differences() {
    let reports = gradient_suite(0).unwrap();
    assert!(reports.len() >= 100, "only {} cases", reports.len());
    let failed: Vec<_> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {:.3e}", r.layer, r.max_rel_error))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    assert!(worst < GRAD_TOLERANCE);
}
