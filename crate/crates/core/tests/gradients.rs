mod support;

use support::gradcheck;

#[test]
fn analytic_gradients_match_finite_differences() {
    let s = gradcheck::run(50, 2024);
    assert_eq!(s.nets, 50);
    assert!(s.worst < gradcheck::TOLERANCE, "worst relative error {:e} at {}\n{:#?}", s.worst, s.worst_at, s.failures);
}
