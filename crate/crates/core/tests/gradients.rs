use tristream::gradcheck::{check_names, run_all};

#[test]
fn every_op_and_head_matches_finite_differences() {
    let rows = run_all(20, 2024).unwrap();
    assert_eq!(rows.len(), check_names().len());
    for r in &rows {
        println!(
            "{:<16} shapes={} max_rel={:.2e} tol={:.0e}",
            r.name, r.shapes, r.max_rel_error, r.tolerance
        );
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
