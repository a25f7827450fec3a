use mks_core::checks::{self, UnitKind};

#[test]
fn every_registered_unit_passes() {
    let mut failures = Vec::new();
    for unit in checks::units() {
        let r = unit.run(0.0).unwrap();
        println!(
            "{:<24} {:?} max_rel_error={:.3e} checked={} worst={}[{}]",
            r.name, unit.kind, r.max_rel_error, r.checked, r.worst.0, r.worst.1
        );
        assert!(r.tolerance <= 1e-5);
        if !r.passed {
            failures.push(r.name.clone());
        }
    }
    assert!(failures.is_empty(), "failed: {failures:?}");
}

#[test]
fn required_units_are_registered() {
    for name in [
        "conv2d",
        "depthwise_dilated",
        "batchnorm_train",
        "sa_extract",
        "sa_attention",
        "sa_fuse",
        "sa_forward",
        "ca_forward",
        "mks_block_forward",
        "patch_embed",
        "backbone_head",
        "bce_loss",
    ] {
        assert!(checks::find(name).is_some(), "{name}");
    }
    assert!(checks::units().iter().any(|u| u.kind == UnitKind::Module));
}

#[test]
fn perturbed_backward_fails_for_every_module() {
    for unit in checks::select("modules").unwrap() {
        let r = unit.run(1e-2).unwrap();
        assert!(!r.passed, "{} accepted a perturbed backward", r.name);
    }
}
