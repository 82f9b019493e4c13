use serialcast::backbone::ModelConfig;
use serialcast::trainer::gradient_check_suite;

#[test]
fn tiny_model_gradients() {
    let reports = gradient_check_suite(&ModelConfig::tiny(), 7).unwrap();
    for r in &reports {
        println!("{:<22} rel {:.2e} abs {:.2e} {}", r.param_name, r.max_rel_err, r.max_abs_err, r.passed);
    }
    assert!(reports.iter().all(|r| r.passed));
}
