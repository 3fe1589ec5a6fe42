use std::f64::consts::PI;

use proptest::prelude::*;

use feller_core::fields::VectorField;
use feller_core::manifold::{sphere_tangent_basis, Coords};
use feller_core::{Manifold, ManifoldId};

/// Random point and tangent vector on a built-in, with `|v| ≤ 1`.
fn point_and_velocity(m: ManifoldId, a: f64, b: f64, c: f64, d: f64) -> (Vec<f64>, Vec<f64>) {
    match m {
        ManifoldId::Euclidean(_) => (vec![3.0 * a, -2.0 * b], vec![c, d]),
        ManifoldId::Circle => (vec![PI * (a + 1.0)], vec![c]),
        ManifoldId::Torus2 => (vec![PI * (a + 1.0), PI * (b + 1.0)], vec![c * 0.7, d * 0.7]),
        ManifoldId::HyperbolicHalfPlane => {
            let y = (1.5 * b).exp();
            // unit-bounded in the hyperbolic metric
            (vec![2.0 * a, y], vec![0.7 * c * y, 0.7 * d * y])
        }
        ManifoldId::Sphere2 => {
            let (th, ph) = (PI * 0.5 * (a + 1.0), PI * b);
            let x = vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
            let (e1, e2) = sphere_tangent_basis(&x);
            let v = (0..3).map(|i| 0.7 * (c * e1[i] + d * e2[i])).collect();
            (x, v)
        }
    }
}

const BUILTINS: [ManifoldId; 5] =
    [ManifoldId::Euclidean(2), ManifoldId::Circle, ManifoldId::Torus2, ManifoldId::HyperbolicHalfPlane, ManifoldId::Sphere2];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn geodesics_have_constant_speed(k in 0usize..5, a in -1.0..1.0f64, b in -1.0..1.0f64,
                                     c in -1.0..1.0f64, d in -1.0..1.0f64, t in 0.05..2.0f64) {
        let m = BUILTINS[k];
        let (x, v) = point_and_velocity(m, a, b, c, d);
        let speed = m.norm(&x, &v);
        prop_assume!(speed > 1e-3);
        let h = 1e-3;
        for s in [0.0, 0.3 * t, 0.7 * t, t] {
            let p = m.geodesic_raw(&x, &v, s).unwrap();
            let q = m.geodesic_raw(&x, &v, s + h).unwrap();
            let local = m.distance_raw(&p, &q).unwrap() / h;
            prop_assert!((local / speed - 1.0).abs() < 1e-8, "{m}: {local} vs {speed} at s={s}");
        }
    }

    #[test]
    fn exp_inverts_log(k in 0usize..5, a in -1.0..1.0f64, b in -1.0..1.0f64,
                       c in -1.0..1.0f64, d in -1.0..1.0f64) {
        let m = BUILTINS[k];
        let (x, v) = point_and_velocity(m, a, b, c, d);
        // |v| < 1 keeps y well inside the injectivity radius
        let y = m.geodesic_raw(&x, &v, 1.0).unwrap();
        let w = m.log_raw(&x, &y).unwrap();
        let back = m.geodesic_raw(&x, &w, 1.0).unwrap();
        prop_assert!(m.distance_raw(&back, &y).unwrap() < 1e-8);
    }

    #[test]
    fn distance_is_symmetric_with_triangle_inequality(k in 0usize..5, p in prop::array::uniform6(-1.0..1.0f64)) {
        let m = BUILTINS[k];
        let (x, _) = point_and_velocity(m, p[0], p[1], 0.0, 0.0);
        let (y, _) = point_and_velocity(m, p[2], p[3], 0.0, 0.0);
        let (z, _) = point_and_velocity(m, p[4], p[5], 0.0, 0.0);
        let dxy = m.distance_raw(&x, &y).unwrap();
        prop_assert_eq!(dxy, m.distance_raw(&y, &x).unwrap());
        let dxz = m.distance_raw(&x, &z).unwrap();
        let dzy = m.distance_raw(&z, &y).unwrap();
        prop_assert!(dxy <= dxz + dzy + 1e-10);
    }

    #[test]
    fn frames_resolve_the_inverse_metric(k in 0usize..4, a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let m = BUILTINS[k];
        let (x, _) = point_and_velocity(m, a, b, 0.0, 0.0);
        let frame = m.frame_raw(&x).unwrap();
        let g_inv = m.metric_raw(&x).unwrap().g_inv;
        let dim = m.dim();
        for i in 0..dim {
            for j in 0..dim {
                let s: f64 = frame.iter().map(|e| e[i] * e[j]).sum();
                prop_assert!((s - g_inv[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rotational_fields_resolve_the_sphere_metric(a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let s = ManifoldId::Sphere2.shared();
        let (x, _) = point_and_velocity(ManifoldId::Sphere2, a, b, 0.0, 0.0);
        let ls: Vec<Coords> = (1..=3).map(|k| VectorField::rotational(s.clone(), k).unwrap().eval_raw(&x)).collect();
        // extrinsically, g^{ab} is the tangent projection I - x xᵀ
        for i in 0..3 {
            for j in 0..3 {
                let sum: f64 = ls.iter().map(|l| l[i] * l[j]).sum();
                let want = if i == j { 1.0 } else { 0.0 } - x[i] * x[j];
                prop_assert!((sum - want).abs() < 1e-10);
            }
        }
    }
}
