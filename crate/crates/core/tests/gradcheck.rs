use slc_core::gradcheck::run_suite;

#[test]
fn every_op_matches_finite_differences() {
    let reports = run_suite(20, 11).unwrap();
    for r in &reports {
        println!("{:<18} n={} worst={:.2e} tol={:.0e}", r.name, r.instances, r.worst, r.tolerance);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:?}");
}
