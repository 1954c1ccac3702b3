use tristream::oracle::{equivalence, EQUIVALENCE_NAMES};

#[test]
fn fast_paths_match_brute_force_references() {
    for (i, name) in EQUIVALENCE_NAMES.iter().enumerate() {
        let row = equivalence(name, 150, 31 + i as u64).unwrap();
        println!(
            "{:<22} instances={} max_abs={:.2e}",
            row.name, row.instances, row.max_abs_error
        );
        assert!(row.max_abs_error <= 1e-5, "{name}: {}", row.max_abs_error);
    }
}
