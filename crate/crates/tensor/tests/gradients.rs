use idgen_tensor::gradcheck::primitive_cases;

#[test]
fn every_primitive_matches_central_differences() {
    for case in primitive_cases(7) {
        let report = case.run(200, 11).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{}: max rel error {:.3e} at {:?}",
            case.name,
            report.max_rel_error,
            report.worst
        );
    }
}
