//! Every op's backward rule against central finite differences.

#[path = "common/op_cases.rs"]
mod op_cases;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases::cases() {
        let (err, at) = case.max_rel_err();
        if err > op_cases::TOL {
            failures.push(format!("{}: rel err {err:e} at {at}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
