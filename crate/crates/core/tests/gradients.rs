use omg_fuser::check::{run_checks, CheckOptions, GRAD_TOLERANCE};
use omg_tensor::OpKind;

#[test]
fn full_suite_passes_at_64_bit() {
    let rep = run_checks(&CheckOptions::default()).unwrap();
    println!("{rep}");
    assert!(rep.passed(), "{rep}");
    let model = rep.probes.iter().find(|p| p.name == "model_end_to_end").unwrap();
    assert!(model.max_rel_error < GRAD_TOLERANCE && model.checked > 100);
    assert!(rep.mask.cases >= 500 && rep.mask.mismatches == 0);
}

#[test]
fn faults_in_model_ops_are_caught_and_named() {
    for kind in [OpKind::Attention, OpKind::Gelu, OpKind::ConvTranspose2d] {
        let rep = run_checks(&CheckOptions { quick: true, fault: Some(kind), ..Default::default() }).unwrap();
        assert!(!rep.passed());
        let model = rep.probes.iter().find(|p| p.name == "model_end_to_end").unwrap();
        assert!(!model.passed(), "{kind:?} fault escaped the model check");
        assert_eq!(rep.suspects(), vec![kind], "{rep}");
    }
}
