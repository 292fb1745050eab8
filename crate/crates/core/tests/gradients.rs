mod common;

use caim_core::{Tape, Tensor};

#[test]
fn every_operator_and_stage_matches_finite_differences() {
    let results = common::gradient_suite();
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !(r.max_rel_error <= 1e-4) || r.coords < 3)
        .map(|r| format!("{}: rel {:e} over {} coords", r.name, r.max_rel_error, r.coords))
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn min_gradient_goes_to_earliest_minimiser() {
    let mut tape = Tape::<f64>::new();
    // column 0: unique minimum at k = 2; column 1: tie between k = 1 and k = 3
    let x = tape.param(Tensor::from_vec(&[4, 2], vec![3.0, 2.0, 1.0, 0.5, -1.0, 4.0, 0.0, 0.5]).unwrap());
    let m = tape.min_axis(x, 0).unwrap();
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}
