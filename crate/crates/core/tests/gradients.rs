use udam_core::gradcheck::{check_all_ops, check_composite, OPS};
use udam_core::rng::rng_from;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let results = check_all_ops(100, 7, EPS).unwrap();
    assert_eq!(results.len(), OPS.len());
    for (op, worst) in results {
        assert!(worst <= TOL, "{op}: relative error {worst:e}");
    }
}

#[test]
fn three_layer_network_matches_finite_differences() {
    let mut rng = rng_from(&[99]);
    for i in 0..100 {
        let g = check_composite(&mut rng, EPS).unwrap();
        assert!(g.max_rel_error <= TOL, "sample {i}: {g:?}");
    }
}
