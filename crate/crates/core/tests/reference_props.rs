use feller_core::chernoff::{GridFunction, GridKind, Interp};
use feller_core::manifold::Coords;
use feller_core::reference::{exact_semigroup, fd_solve, grid_mass, FdSolverSettings, HeatKernelId, SERIES_TOL};
use feller_core::{DriftPolicy, Error, GeneratorSpec, Manifold, ManifoldId, ScalarField, VectorField};

fn circle_variable(potential: Option<ScalarField>) -> GeneratorSpec {
    let c = ManifoldId::Circle.shared();
    let a = VectorField::from_fn(c.clone(), "1+0.3*sin", |x| Coords::from_slice(&[1.0 + 0.3 * x[0].sin()]));
    GeneratorSpec::new(c, vec![a], DriftPolicy::DerivedLinkA, potential, true).unwrap()
}

fn torus_variable() -> GeneratorSpec {
    let t = ManifoldId::Torus2.shared();
    let a1 = VectorField::from_fn(t.clone(), "a1", |x| Coords::from_slice(&[1.0 + 0.2 * x[1].sin(), 0.3 * x[0].cos()]));
    let a2 = VectorField::from_fn(t.clone(), "a2", |x| Coords::from_slice(&[0.1 * x[1].cos(), 0.8 + 0.25 * x[0].sin()]));
    GeneratorSpec::new(t, vec![a1, a2], DriftPolicy::DerivedLinkA, None, true).unwrap()
}

fn bump(x: &[f64]) -> f64 {
    x.iter().map(|v| (2.0 * (v.cos() - 1.0)).exp()).product()
}

#[test]
fn fd_conserves_mass_with_symmetric_drift() {
    let t = 0.5;
    for (spec, kind) in [
        (circle_variable(None), GridKind::Circle { n: 256 }),
        (torus_variable(), GridKind::Torus2 { n1: 48, n2: 48 }),
    ] {
        let f0 = GridFunction::from_fn(kind, Interp::Linear, bump).unwrap();
        let u = fd_solve(&spec, &f0, t, &FdSolverSettings::with_steps(50)).unwrap();
        let (m0, m1) = (grid_mass(&f0).unwrap(), grid_mass(&u).unwrap());
        assert!((m1 - m0).abs() <= 1e-8 * t, "{kind:?}: {m0} -> {m1}");
    }
}

#[test]
fn fd_obeys_the_maximum_principle() {
    let c = ScalarField::from_fn("-(1+sin)", |x| -(1.0 + x[0].sin()));
    for spec in [circle_variable(None), circle_variable(Some(c))] {
        let kind = GridKind::Circle { n: 200 };
        let f0 = GridFunction::from_fn(kind, Interp::Linear, |x| bump(x) - 0.3).unwrap();
        let max0 = f0.values().iter().cloned().fold(f64::MIN, f64::max);
        let u = fd_solve(&spec, &f0, 1.0, &FdSolverSettings::with_steps(100)).unwrap();
        let max1 = u.values().iter().cloned().fold(f64::MIN, f64::max);
        assert!(max1 <= max0 + 1e-8, "{max0} -> {max1}");
    }
}

#[test]
fn fd_converges_at_second_order_in_space() {
    let spec = circle_variable(None);
    let solve = |n| {
        let f0 = GridFunction::from_fn(GridKind::Circle { n }, Interp::Linear, bump).unwrap();
        fd_solve(&spec, &f0, 0.5, &FdSolverSettings::with_steps(100)).unwrap()
    };
    let fine = solve(1024);
    let err = |n: usize| {
        let u = solve(n);
        (0..n).map(|i| (u.values()[i] - fine.eval(&u.node(i))).abs()).fold(0.0, f64::max)
    };
    let (e64, e128) = (err(64), err(128));
    let ratio = e64 / e128;
    assert!((3.0..=5.0).contains(&ratio), "{e64:e} / {e128:e} = {ratio}");
}

#[test]
fn fd_refinements_of_the_variable_field_agree() {
    let spec = circle_variable(None);
    let solve = |n| {
        let f0 = GridFunction::from_fn(GridKind::Circle { n }, Interp::CubicPeriodic, |x| x[0].cos()).unwrap();
        fd_solve(&spec, &f0, 0.5, &FdSolverSettings::with_steps(200)).unwrap()
    };
    let coarse = solve(128);
    for n in [256, 512] {
        let fine = solve(n);
        let gap = (0..128).map(|i| (coarse.values()[i] - fine.values()[i * n / 128]).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-4, "128 vs {n}: {gap:e}");
    }
}

#[test]
fn fd_matches_the_circle_heat_kernel() {
    let c = ManifoldId::Circle.shared();
    let spec = GeneratorSpec::new(c.clone(), vec![VectorField::frame(c, 1).unwrap()], DriftPolicy::DerivedLinkA, None, true).unwrap();
    let f = ScalarField::from_fn("bump", bump);
    let kind = GridKind::Circle { n: 512 };
    let u = fd_solve(&spec, &GridFunction::sample(kind, Interp::Linear, &f).unwrap(), 0.3, &FdSolverSettings::with_steps(300)).unwrap();
    for i in (0..512).step_by(37) {
        let x = ManifoldId::Circle.point(&u.node(i)).unwrap();
        let exact = exact_semigroup(HeatKernelId::WrappedGaussS1, &f, 0.3, &x).unwrap();
        assert!((u.values()[i] - exact).abs() < 1e-4, "node {i}");
    }
}

#[test]
fn sphere_series_is_stable_under_doubling() {
    let s = ManifoldId::Sphere2;
    let f = ScalarField::from_fn("exp(z)cos(3x)", |p| p[2].exp() * (3.0 * p[0]).cos());
    for t in [0.05, 0.2, 1.0] {
        for x in [[0.0, 0.0, 1.0], [0.6, 0.0, 0.8], [0.0, -1.0, 0.0]] {
            let x = s.point(&x).unwrap();
            let a = exact_semigroup(HeatKernelId::SphereHarmonics(32), &f, t, &x).unwrap();
            let b = exact_semigroup(HeatKernelId::SphereHarmonics(64), &f, t, &x).unwrap();
            assert!((a - b).abs() < SERIES_TOL, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn sphere_series_flags_insufficient_truncation() {
    let f = ScalarField::from_fn("sharp", |p| (20.0 * (p[2] - 1.0)).exp());
    let x = ManifoldId::Sphere2.default_point();
    let r = exact_semigroup(HeatKernelId::SphereHarmonics(8), &f, 1e-3, &x);
    assert!(matches!(r, Err(Error::TruncationBudgetExceeded(_))), "{r:?}");
}

#[test]
fn kernels_preserve_constants() {
    let one = ScalarField::constant(1.0);
    for (k, x) in [
        (HeatKernelId::WrappedGaussS1, vec![1.0]),
        (HeatKernelId::TorusProduct, vec![1.0, 5.0]),
        (HeatKernelId::GaussRd(2), vec![0.3, -0.2]),
        (HeatKernelId::HyperbolicH2, vec![0.0, 2.0]),
        (HeatKernelId::SphereHarmonics(16), vec![0.0, 0.0, 1.0]),
    ] {
        let p = k.manifold().point(&x).unwrap();
        let v = exact_semigroup(k, &one, 0.4, &p).unwrap();
        assert!((v - 1.0).abs() < 1e-8, "{k}: {v}");
    }
}
