mod common;

#[test]
fn every_op_and_block_matches_central_differences() {
    let suite = common::gradcheck_suite().unwrap();
    let mut bad = Vec::new();
    for (name, r) in &suite {
        assert!(r.coords >= 10, "{name}: only {} coordinates probed", r.coords);
        if !(r.rel_err < 1e-5) {
            bad.push(format!("{name}: {:.3e}", r.rel_err));
        }
    }
    assert!(bad.is_empty(), "gradient mismatches: {bad:?}");
}
