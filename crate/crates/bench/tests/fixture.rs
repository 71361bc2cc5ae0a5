use covmc_bench::problem;

#[test]
fn fixture_has_requested_shape() {
    let p = problem(30, 20);
    assert_eq!((p.y.nrows(), p.y.ncols()), (30, 20));
    assert_eq!(p.start.rank(), 3);
    assert!(p.y.observed_fraction() > 0.3 && p.y.observed_fraction() < 0.7);
}
