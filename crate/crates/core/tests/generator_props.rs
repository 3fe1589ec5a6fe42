use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::DMatrix;

use feller_core::fields::{apply_generator_raw, default_sample, VectorField};
use feller_core::manifold::Coords;
use feller_core::ode::OdeSettings;
use feller_core::rng::substream;
use feller_core::{DriftPolicy, GeneratorSpec, Manifold, ManifoldId, ScalarField};
use rand::Rng;

fn circle_spec() -> GeneratorSpec {
    let c = ManifoldId::Circle.shared();
    let a = VectorField::from_fn(c.clone(), "1+0.3*sin", |x| Coords::from_slice(&[1.0 + 0.3 * x[0].sin()]));
    GeneratorSpec::new(c, vec![a], DriftPolicy::DerivedLinkA, None, true).unwrap()
}

fn torus_spec() -> GeneratorSpec {
    let t = ManifoldId::Torus2.shared();
    let a1 = VectorField::from_fn(t.clone(), "a1", |x| Coords::from_slice(&[1.0 + 0.2 * x[1].sin(), 0.3 * x[0].cos()]));
    let a2 = VectorField::from_fn(t.clone(), "a2", |x| Coords::from_slice(&[0.1 * x[1].cos(), 0.8 + 0.25 * x[0].sin()]));
    GeneratorSpec::new(t, vec![a1, a2], DriftPolicy::DerivedLinkA, None, true).unwrap()
}

/// Random trigonometric polynomial of degree ≤ 3 in every angle.
fn trig_poly(seed: u64, dim: usize) -> ScalarField {
    let mut rng = substream(seed, 0);
    let terms: Vec<(Vec<f64>, f64, f64)> = (0..6)
        .map(|_| {
            let k = (0..dim).map(|_| rng.random_range(0..=3) as f64).collect();
            (k, rng.random_range(-1.0..1.0), rng.random_range(0.0..TAU))
        })
        .collect();
    ScalarField::from_fn("trig", move |x| {
        terms.iter().map(|(k, a, p)| a * (k.iter().zip(x).map(|(k, x)| k * x).sum::<f64>() + p).cos()).sum()
    })
}

fn nodes(m: ManifoldId, n: usize) -> Vec<Vec<f64>> {
    let h = TAU / n as f64;
    match m {
        ManifoldId::Circle => (0..n).map(|i| vec![i as f64 * h]).collect(),
        _ => (0..n * n).map(|i| vec![(i % n) as f64 * h, (i / n) as f64 * h]).collect(),
    }
}

/// Trapezoid `⟨u, L₀v⟩` against the flat volume of the circle or the torus.
fn pairing(spec: &GeneratorSpec, u: &ScalarField, v: &ScalarField, pts: &[Vec<f64>]) -> f64 {
    let ode = OdeSettings::default();
    let w = TAU.powi(spec.d() as i32) / pts.len() as f64;
    pts.iter().map(|x| u.eval(x) * apply_generator_raw(spec, v, x, &ode).unwrap()).sum::<f64>() * w
}

#[test]
fn derived_drift_makes_the_generator_symmetric() {
    for (spec, m, sizes) in [(circle_spec(), ManifoldId::Circle, [16, 64]), (torus_spec(), ManifoldId::Torus2, [8, 24])] {
        let (f, h) = (trig_poly(1, spec.d()), trig_poly(2, spec.d()));
        let gaps: Vec<f64> = sizes
            .iter()
            .map(|&n| {
                let pts = nodes(m, n);
                (pairing(&spec, &h, &f, &pts) - pairing(&spec, &f, &h, &pts)).abs()
            })
            .collect();
        assert!(gaps[1] < 1e-5, "{m}: {gaps:?}");
        assert!(gaps[1] <= gaps[0] + 1e-6, "{m}: {gaps:?}");
    }
}

#[test]
fn derived_drift_makes_the_generator_non_positive() {
    for (spec, m, n) in [(circle_spec(), ManifoldId::Circle, 64), (torus_spec(), ManifoldId::Torus2, 24)] {
        let pts = nodes(m, n);
        for seed in 0..10 {
            let f = trig_poly(100 + seed, spec.d());
            let q = pairing(&spec, &f, &f, &pts);
            assert!(q <= 1e-8, "{m} seed {seed}: ⟨f, L₀f⟩ = {q}");
        }
    }
}

#[test]
fn analytic_and_finite_difference_generators_agree() {
    let spec = torus_spec();
    let plain = ScalarField::from_fn("sin(a)cos(2b)", |x| x[0].sin() * (2.0 * x[1]).cos());
    let exact = plain.clone().with_derivatives(|x| {
        let (s, c, s2, c2) = (x[0].sin(), x[0].cos(), (2.0 * x[1]).sin(), (2.0 * x[1]).cos());
        let grad = Coords::from_vec(vec![c * c2, -2.0 * s * s2]);
        let hess = DMatrix::from_row_slice(2, 2, &[-s * c2, -2.0 * c * s2, -2.0 * c * s2, -4.0 * s * c2]);
        (grad, hess)
    });
    let ode = OdeSettings::default();
    for x in default_sample(spec.manifold().as_ref()) {
        let a = apply_generator_raw(&spec, &exact, x.coords(), &ode).unwrap();
        let b = apply_generator_raw(&spec, &plain, x.coords(), &ode).unwrap();
        assert!((a - b).abs() < 1e-5, "at {:?}: {a} vs {b}", x.coords());
    }
}

#[test]
fn built_generators_are_elliptic_on_their_samples() {
    let s = ManifoldId::Sphere2.shared();
    let rot = (1..=3).map(|k| VectorField::rotational(s.clone(), k).unwrap()).collect();
    let sphere = GeneratorSpec::new(s, rot, DriftPolicy::DerivedLinkA, None, true).unwrap();
    let h: Arc<dyn Manifold> = ManifoldId::HyperbolicHalfPlane.shared();
    let frame = (1..=2).map(|k| VectorField::frame(h.clone(), k).unwrap()).collect();
    let hyp = GeneratorSpec::new(h, frame, DriftPolicy::DerivedLinkA, None, true).unwrap();
    for spec in [circle_spec(), torus_spec(), sphere, hyp] {
        for x in default_sample(spec.manifold().as_ref()) {
            assert!(spec.min_singular_value(x.coords()) > 1e-3);
        }
    }
}
