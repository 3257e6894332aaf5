use std::time::Instant;

use facesr_core::verify::{parse_op_kind, run_case, run_suite, SUITE};

fn seeds() -> Vec<u64> {
    (0..5).collect()
}

#[test]
fn full_suite_passes_in_both_precisions() {
    for f64_mode in [false, true] {
        let t0 = Instant::now();
        let rows = run_suite(f64_mode, &[], &seeds(), None).unwrap();
        assert_eq!(rows.len(), SUITE.len());
        for r in &rows {
            println!("{:<36} {} max rel {:.3e} ({} coords, {} kinks)", r.case, r.precision, r.max_rel_error, r.checked, r.skipped_kinks);
        }
        println!("elapsed {:?}", t0.elapsed());
        let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| (&r.case, r.max_rel_error)).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}

#[test]
fn injected_faults_are_caught() {
    for (op, case) in [("sigmoid", "sigmoid"), ("conv2d", "conv2d"), ("batch_norm", "batch_norm_train"), ("deconv2d", "fine_decoder"), ("ln", "adversarial_loss"), ("concat", "fsrnet_loss_end_to_end")] {
        let kind = parse_op_kind(op).unwrap();
        let report = run_case::<f64>(case, 1, Some(kind)).unwrap();
        assert!(!report.passes(1e-3), "{op} fault in {case} went unnoticed: {report:?}");
    }
    assert!(parse_op_kind("softmax").is_err());
    assert!(run_case::<f64>("no_such_case", 0, None).is_err());
}
