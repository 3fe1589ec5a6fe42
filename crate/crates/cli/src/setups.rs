//! Generators shared by the validation suite, the experiments and the tests.

use std::f64::consts::PI;
use std::sync::Arc;

use feller_core::manifold::{wrap_angle, Coords};
use feller_core::{DriftPolicy, GeneratorSpec, Manifold, ManifoldId, Result, ScalarField, VectorField};

pub fn shared(m: ManifoldId) -> Arc<dyn Manifold> {
    Arc::new(m)
}

/// `½ d²/dx²` on the line: `A_1 ≡ 1`, `A_0 = 0`, `c = 0`.
pub fn line_heat() -> Result<GeneratorSpec> {
    let e = shared(ManifoldId::Euclidean(1));
    GeneratorSpec::new(
        e.clone(),
        vec![VectorField::constant(e.clone(), &[1.0])?],
        DriftPolicy::Explicit(VectorField::zero(e)),
        None,
        true,
    )
}

/// `½ d²/dθ²` on the circle.
pub fn circle_heat() -> Result<GeneratorSpec> {
    let c = shared(ManifoldId::Circle);
    GeneratorSpec::new(c.clone(), vec![VectorField::frame(c, 1)?], DriftPolicy::DerivedLinkA, None, true)
}

/// `A_1(θ) = 1 + 0.3 sin θ` with the derived symmetric drift.
pub fn circle_variable() -> Result<GeneratorSpec> {
    let c = shared(ManifoldId::Circle);
    let a = VectorField::from_fn(c.clone(), "1+0.3*sin(x)", |x| Coords::from_slice(&[1.0 + 0.3 * x[0].sin()]));
    GeneratorSpec::new(c, vec![a], DriftPolicy::DerivedLinkA, None, true)
}

/// `½(L_1² + L_2² + L_3²) = ½Δ` on the unit sphere.
pub fn sphere_rotational() -> Result<GeneratorSpec> {
    let s = shared(ManifoldId::Sphere2);
    let fields = (1..=3).map(|k| VectorField::rotational(s.clone(), k)).collect::<Result<Vec<_>>>()?;
    GeneratorSpec::new(s, fields, DriftPolicy::DerivedLinkA, None, true)
}

/// `½Δ` on the half-plane through the orthonormal frame `{y∂_x, y∂_y}`.
pub fn hyperbolic_frame() -> Result<GeneratorSpec> {
    let h = shared(ManifoldId::HyperbolicHalfPlane);
    let fields = vec![VectorField::frame(h.clone(), 1)?, VectorField::frame(h.clone(), 2)?];
    GeneratorSpec::new(h, fields, DriftPolicy::DerivedLinkA, None, true)
}

/// `1 / cosh d(p, i)` on the half-plane.
pub fn hyperbolic_bump() -> ScalarField {
    ScalarField::from_fn("2*y/(x^2+y^2+1)", |p| 2.0 * p[1] / (p[0] * p[0] + p[1] * p[1] + 1.0))
}

/// `A(x) = tanh x` on the line, whose flow is `sinh x(t) = e^t sinh x`.
pub fn tanh_field() -> VectorField {
    VectorField::from_fn(shared(ManifoldId::Euclidean(1)), "tanh(x)", |x| Coords::from_slice(&[x[0].tanh()]))
        .with_exact_flow(|x, t| Coords::from_slice(&[(x[0].sinh() * t.exp()).asinh()]))
        .with_bounds(1.0, 1.0)
}

/// `A(θ) = sin θ` on the circle, whose flow is `tan(θ(t)/2) = e^t tan(θ/2)`.
pub fn sin_field() -> VectorField {
    VectorField::from_fn(shared(ManifoldId::Circle), "sin(x)", |x| Coords::from_slice(&[x[0].sin()]))
        .with_exact_flow(|x, t| {
            let th = wrap_angle(x[0]);
            if th == 0.0 || th == PI {
                return Coords::from_slice(&[th]);
            }
            let half = if th > PI { th - 2.0 * PI } else { th } / 2.0;
            Coords::from_slice(&[wrap_angle(2.0 * (half.tan() * t.exp()).atan())])
        })
        .with_bounds(1.0, 1.0)
}
