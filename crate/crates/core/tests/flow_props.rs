use std::f64::consts::{PI, TAU};

use rand::Rng;

use feller_core::flows::{flow_raw, monotone_distance_horizon, verify_distance_monotonicity};
use feller_core::manifold::Coords;
use feller_core::ode::{OdeMethod, OdeSettings};
use feller_core::rng::substream;
use feller_core::{Manifold, ManifoldId, VectorField};

/// `a·tanh(bx + c) + e·sin(kx + φ)` with `sup |A'| ≤ |ab| + |ek|`.
fn random_field(m: ManifoldId, seed: u64) -> (VectorField, f64) {
    let mut rng = substream(seed, 0);
    let a: f64 = rng.random_range(-1.0..1.0);
    let b: f64 = rng.random_range(0.2..2.0);
    let c: f64 = rng.random_range(-1.0..1.0);
    let e: f64 = rng.random_range(-0.5..0.5);
    let k = rng.random_range(1..=3) as f64;
    let phi: f64 = rng.random_range(0.0..TAU);
    let m2 = (a * b).abs() + (e * k).abs();
    let field = match m {
        // periodic on the circle: tanh composed with sin
        ManifoldId::Circle => VectorField::from_fn(m.shared(), "tanh∘sin + sin", move |x| {
            Coords::from_slice(&[a * (b * x[0].sin() + c).tanh() + e * (k * x[0] + phi).sin()])
        }),
        _ => VectorField::from_fn(m.shared(), "tanh + sin", move |x| {
            Coords::from_slice(&[a * (b * x[0] + c).tanh() + e * (k * x[0] + phi).sin()])
        }),
    };
    (field, m2)
}

#[test]
fn random_bounded_fields_respect_the_horizon() {
    for seed in 0..20u64 {
        let m = if seed % 2 == 0 { ManifoldId::Euclidean(1) } else { ManifoldId::Circle };
        let (a, m2) = random_field(m, seed);
        let t = 0.99 * monotone_distance_horizon(m2, 1).unwrap();
        let starts: Vec<_> = (0..40)
            .map(|i| match m {
                ManifoldId::Circle => m.point(&[i as f64 * TAU / 40.0]).unwrap(),
                _ => m.point(&[-3.0 + 6.0 * i as f64 / 39.0]).unwrap(),
            })
            .collect();
        let r = verify_distance_monotonicity(&a, &starts, t, 50, Some(m2), &OdeSettings::default()).unwrap();
        assert_eq!(r.violations, 0, "seed {seed} on {m}: worst drop {:e}", r.worst_decrease);
    }
}

#[test]
fn flows_compose_and_reverse() {
    let s = OdeSettings { tol: 1e-11, ..OdeSettings::default() };
    for seed in 0..5u64 {
        let (a, _) = random_field(ManifoldId::Circle, 50 + seed);
        let x = [0.4 + seed as f64];
        let once = flow_raw(&a, &x, 1.3, &s).unwrap();
        let twice = flow_raw(&a, &flow_raw(&a, &x, 0.5, &s).unwrap(), 0.8, &s).unwrap();
        let m = ManifoldId::Circle;
        assert!(m.distance_raw(&once, &twice).unwrap() < 10.0 * 1e-9);
        let back = flow_raw(&a.negated(), &once, 1.3, &s).unwrap();
        assert!(m.distance_raw(&back, &x).unwrap() < 10.0 * 1e-9);
    }
}

#[test]
fn rk4_halving_gives_sixteenfold_error_drop() {
    let e = ManifoldId::Euclidean(1).shared();
    let a = VectorField::from_fn(e, "x", |x| Coords::from_slice(&[x[0]]));
    let err = |h: f64| {
        let s = OdeSettings { method: OdeMethod::Rk4Fixed, h_init: Some(h), ..OdeSettings::default() };
        (flow_raw(&a, &[1.0], 1.0, &s).unwrap()[0] - 1f64.exp()).abs()
    };
    let ratio = err(0.1) / err(0.05);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn circle_flows_stay_canonical() {
    let s = OdeSettings::default();
    let (a, _) = random_field(ManifoldId::Circle, 3);
    for i in 0..20 {
        let y = flow_raw(&a, &[i as f64 * 0.9 - PI], 7.0, &s).unwrap();
        assert!((0.0..TAU).contains(&y[0]), "{y:?}");
    }
}
