use sbp::checks::{run_check, run_suite, CHECK_NAMES};

const SEEDS: usize = 20;

fn assert_passes(name: &str) {
    let e = run_check(name, 1e-4, SEEDS, false).unwrap();
    assert_eq!(e.checked, SEEDS);
    assert!(e.passed, "{name}: max relative error {:.3e}", e.max_rel_error);
}

#[test]
fn conv2d() {
    for name in ["conv2d.input", "conv2d.weight", "conv2d.bias"] {
        assert_passes(name);
    }
}

#[test]
fn relu_and_maxpool() {
    assert_passes("relu");
    assert_passes("maxpool2x2");
}

#[test]
fn linear_and_heads() {
    for name in ["linear.input", "linear.weight", "linear.bias"] {
        assert_passes(name);
    }
}

#[test]
fn bilinear_layers() {
    for name in ["bilinear_pool", "signed_sqrt", "l2_normalize", "descriptor"] {
        assert_passes(name);
    }
}

#[test]
fn losses() {
    assert_passes("cross_entropy");
    assert_passes("gce");
}

#[test]
fn pipeline() {
    for name in ["pipeline.params", "pipeline.input", "pipeline.baseline"] {
        assert_passes(name);
    }
}

#[test]
fn every_corrupted_backward_is_caught() {
    for name in CHECK_NAMES {
        let e = run_check(name, 1e-4, 3, true).unwrap();
        assert!(!e.passed, "{name} did not notice a 1% gradient error");
    }
}

#[test]
fn suite_has_a_tolerance_floor() {
    let entries = run_suite(1e-12, 2, None).unwrap();
    assert!(entries.iter().any(|e| !e.passed));
}
