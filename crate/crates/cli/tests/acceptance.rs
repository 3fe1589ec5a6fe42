//! Runs every acceptance criterion and prints one verdict line per criterion.

use feller_cli::validation::{criteria, outcome_line, ValidationOptions};

fn check(id: u32) {
    let opts = ValidationOptions::default();
    let c = criteria().into_iter().find(|c| c.id == id).expect("criterion exists");
    let out = c.run(&opts);
    println!("{}", outcome_line(&out));
    assert!(out.passed, "{}", outcome_line(&out));
}

#[test]
fn criterion_01_quadratic_exactness() {
    check(1);
}

#[test]
fn criterion_02_circle_eigenfunction() {
    check(2);
}

#[test]
fn criterion_03_variable_coefficients() {
    check(3);
}

#[test]
fn criterion_04_sphere_rotational() {
    check(4);
}

#[test]
fn criterion_05_hyperbolic_plane() {
    check(5);
}

#[test]
fn criterion_06_consistency_order() {
    check(6);
}

#[test]
fn criterion_07_contraction_positivity() {
    check(7);
}

#[test]
fn criterion_08_walk_operator_equivalence() {
    check(8);
}

#[test]
fn criterion_09_weak_convergence() {
    check(9);
}

#[test]
fn criterion_10_skeleton_equality() {
    check(10);
}

#[test]
fn criterion_11_distance_monotonicity() {
    check(11);
}

#[test]
fn criterion_12_driftless_discrepancy() {
    check(12);
}
