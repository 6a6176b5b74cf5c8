//! Metrics against brute-force references written from their definitions.

use reldeepsym::evals::welch_t;

mod common;
use common::*;

const CASES: usize = 1000;

#[test]
fn loss_matches_reference() {
    let g = loss_oracle_gap(CASES, 1);
    assert!(g <= ORACLE_TOL, "{g:e}");
}

#[test]
fn effect_error_matches_reference() {
    let g = effect_error_oracle_gap(CASES, 2);
    assert!(g <= ORACLE_TOL, "{g:e}");
}

#[test]
fn welch_matches_reference() {
    let g = welch_oracle_gap(CASES, 4);
    assert!(g <= ORACLE_TOL, "{g:e}");
}

#[test]
fn welch_worked_example() {
    let a = [2.2, 2.4, 2.0];
    let b = [0.5, 0.52, 0.48];
    let r = welch_t(&a, &b).unwrap();
    // means 2.2 and 0.5; variances 0.04 and 0.0004
    let se = (0.04f64 / 3.0 + 0.0004 / 3.0).sqrt();
    assert!(close(r.t, 1.7 / se));
    let (qa, qb) = (0.04f64 / 3.0, 0.0004f64 / 3.0);
    assert!(close(r.df, (qa + qb).powi(2) / (qa * qa / 2.0 + qb * qb / 2.0)));
    assert!(r.p < 0.01 && r.p > 0.001, "{}", r.p);
    let swapped = welch_t(&b, &a).unwrap();
    assert_eq!(swapped.t, -r.t);
    assert_eq!(swapped.p, r.p);
}

#[test]
fn welch_rejects_degenerate_input() {
    assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
    assert!(welch_t(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    let same = welch_t(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
    assert_eq!((same.t, same.p), (0.0, 1.0));
    let apart = welch_t(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
    assert_eq!((apart.t, apart.p), (f64::INFINITY, 0.0));
}
