mod common;

use common::gradcheck::*;
use common::ioi_pairs;
use ssm_circuits::metrics::Metric;

#[test]
fn random_model_metric_gradients_match_finite_differences() {
    let model = random_toy_model(17);
    let pair = well_conditioned_pair(&model, 5);
    let r = gradient_check(&model, &pair, Metric::NormalizedLogitDiff, 1e-5, 7);
    assert!(r.checked > 6000);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn trained_model_metric_gradients_match_finite_differences() {
    let model = trained_toy_model();
    let r = gradient_check(
        &model,
        &ioi_pairs(1, 5)[0],
        Metric::NormalizedLogitDiff,
        1e-5,
        11,
    );
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn logit_diff_gradients_match_on_an_ill_conditioned_prompt() {
    let model = random_toy_model(17);
    let r = gradient_check(&model, &ioi_pairs(1, 5)[0], Metric::LogitDiff, 1e-5, 13);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
