//! Analytic gradients against central finite differences.

mod support;

use answerme_core::model::FusionKind;
use support::gradcheck::{kernel_suite, model_check, KERNEL_TOL, MODEL_COORDS, MODEL_TOL};

#[test]
fn kernel_gradients() {
    let results = kernel_suite();
    assert!(results.len() >= 18);
    let bad: Vec<_> = results.iter().filter(|(_, worst)| !(*worst < KERNEL_TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

fn check_model(kind: FusionKind) {
    let c = model_check(kind);
    assert!(c.coords >= MODEL_COORDS);
    assert!(c.worst < MODEL_TOL, "{}: worst relative error {:e} at {}", kind.name(), c.worst, c.at);
}

#[test]
fn end_to_end_parameter_gradients_concat() {
    check_model(FusionKind::ConcatEncoder);
}

#[test]
fn end_to_end_parameter_gradients_cross_attention() {
    check_model(FusionKind::EncoderDecoder);
}
