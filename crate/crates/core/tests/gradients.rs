use ag4_core::gradcheck::{check_gradients, reference_fixture, GradCheckOptions, DEFAULT_TOLERANCE};
use ag4_core::tensor::BackwardFault;
use ag4_core::train::Template;

#[test]
fn injected_backward_faults_are_caught() {
    let (model, policy, examples) = reference_fixture(7).unwrap();
    for (fault, group) in [
        (BackwardFault::GeluDerivative, "adapter"),
        (BackwardFault::RmsNormGain, "norm"),
    ] {
        let opts = GradCheckOptions {
            fault: Some(fault),
            ..Default::default()
        };
        let report = check_gradients(&model, &policy, &examples, &Template::Caption, &opts).unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE), "{fault:?} went unnoticed");
        assert!(
            report
                .groups
                .iter()
                .any(|g| g.path.contains(group) && g.max_rel_err >= DEFAULT_TOLERANCE),
            "{fault:?}:\n{}",
            report.render(DEFAULT_TOLERANCE)
        );
    }
}
