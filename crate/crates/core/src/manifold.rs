//! Built-in Riemannian manifolds of bounded geometry.
//!
//! Every manifold works in one canonical coordinate system:
//!
//! | id | coordinates | chart constraint |
//! |----|-------------|------------------|
//! | `euclidean:<d>` | Cartesian `x1..xd` | none |
//! | `circle` | angle `theta` | reduced to `[0, 2π)` |
//! | `torus2` | angles `theta1, theta2` | reduced to `[0, 2π)` |
//! | `hyperbolic-h2` | upper half-plane `x, y` | `y > 0` |
//! | `sphere2` | unit vector `x, y, z` in ambient 3-space | `‖x‖ = 1` |
//!
//! The sphere stores points extrinsically and evaluates chart quantities
//! (metric, connection, divergence) in the orthographic chart of the tangent
//! plane at the evaluation point. At the chart center the metric is the
//! identity and its first derivatives vanish.
//!
//! Geometric certification (bounded geometry, injectivity radius) of the
//! built-ins is analytic: the flat spaces and the sphere are homogeneous and
//! the half-plane is the constant-curvature model, so every curvature
//! derivative is uniformly bounded.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::ode::{self, OdeSettings};

/// Coordinate storage. Inline for up to four components.
pub type Coords = SmallVec<[f64; 4]>;

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    coords: Coords,
}

impl Point {
    pub fn new<I: IntoIterator<Item = f64>>(coords: I) -> Self {
        Point { coords: coords.into_iter().collect() }
    }

    pub fn from_coords(coords: Coords) -> Self {
        Point { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Coords {
        self.coords
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub base: Point,
    pub comps: Coords,
}

impl TangentVector {
    pub fn new<I: IntoIterator<Item = f64>>(base: Point, comps: I) -> Self {
        TangentVector { base, comps: comps.into_iter().collect() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        TangentVector { base: self.base.clone(), comps: self.comps.iter().map(|c| c * s).collect() }
    }
}

/// Metric tensor, its inverse and the volume density at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricData {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub sqrt_det: f64,
}

impl MetricData {
    pub fn from_metric(g: DMatrix<f64>) -> Result<Self> {
        let det = g.determinant();
        if !(det > 0.0) {
            return Err(Error::InvalidArgument(format!("metric not positive definite (det = {det})")));
        }
        let g_inv = g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("metric not invertible".into()))?;
        Ok(MetricData { g, g_inv, sqrt_det: det.sqrt() })
    }
}

/// Levi-Civita connection coefficients `Γ^a_{bc}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    dim: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(dim: usize) -> Self {
        Christoffel { dim, data: vec![0.0; dim * dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Γ^a_{bc}`.
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.dim + b) * self.dim + c]
    }

    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        let d = self.dim;
        self.data[(a * d + b) * d + c] = value;
    }

    pub fn set_symmetric(&mut self, a: usize, b: usize, c: usize, value: f64) {
        self.set(a, b, c, value);
        self.set(a, c, b, value);
    }
}

/// Reduces an angle to `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Shortest signed angular displacement from `a` to `b`, in `[-π, π)`.
pub fn signed_angle_diff(a: f64, b: f64) -> f64 {
    (b - a + PI).rem_euclid(TAU) - PI
}

fn fd_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-5 * norm.max(1.0)
}

/// Operations every manifold supports. Hot-path methods take raw coordinate
/// slices; the `Point`-based methods validate and delegate.
pub trait Manifold: Send + Sync + fmt::Debug {
    fn label(&self) -> String;

    /// Intrinsic dimension.
    fn dim(&self) -> usize;

    /// Number of stored coordinates (3 for the sphere).
    fn coord_len(&self) -> usize {
        self.dim()
    }

    /// Identifier names usable in expressions, one per stored coordinate.
    fn coord_names(&self) -> Vec<String>;

    fn builtin(&self) -> Option<ManifoldId> {
        None
    }

    fn is_compact(&self) -> bool;

    fn is_flat(&self) -> bool;

    /// True when the stored coordinates form one global chart in which
    /// `christoffel_at` is expressed.
    fn has_global_chart(&self) -> bool {
        true
    }

    fn check_coords(&self, c: &[f64]) -> Result<()>;

    /// Restores the chart constraint after arithmetic (angle wrap, sphere renormalization).
    fn canonicalize(&self, c: &mut Coords);

    /// Removes any component normal to the manifold (identity except for embedded charts).
    fn project_tangent(&self, _x: &[f64], _v: &mut Coords) {}

    fn metric_raw(&self, x: &[f64]) -> Result<MetricData>;

    fn christoffel_raw(&self, x: &[f64]) -> Result<Christoffel>;

    /// `g_x(u, v)` with `u, v` in stored-coordinate components.
    fn inner(&self, x: &[f64], u: &[f64], v: &[f64]) -> f64;

    fn geodesic_raw(&self, x: &[f64], v: &[f64], t: f64) -> Result<Coords>;

    fn log_raw(&self, x: &[f64], y: &[f64]) -> Result<Coords>;

    fn distance_raw(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    fn frame_raw(&self, x: &[f64]) -> Result<Vec<Coords>>;

    /// Coordinate vectors `∂/∂u_j` of the local chart centered at `center`.
    fn chart_basis(&self, center: &[f64]) -> Vec<Coords>;

    /// Components of the tangent vector `v` in the local chart centered at `center`.
    fn chart_components(&self, center: &[f64], v: &[f64]) -> Coords;

    /// Point with local chart coordinates `u` around `center`.
    fn chart_point(&self, center: &[f64], u: &[f64]) -> Coords;

    /// `∂_j log √|g|` at the chart center.
    fn grad_log_sqrt_det(&self, center: &[f64]) -> Coords;

    fn norm(&self, x: &[f64], v: &[f64]) -> f64 {
        self.inner(x, v, v).max(0.0).sqrt()
    }

    /// Builds a point, reducing periodic coordinates and normalizing embedded ones.
    fn point(&self, coords: &[f64]) -> Result<Point> {
        if coords.len() != self.coord_len() {
            return Err(Error::InvalidPoint(format!(
                "{} expects {} coordinates, got {}",
                self.label(),
                self.coord_len(),
                coords.len()
            )));
        }
        let mut c: Coords = coords.iter().copied().collect();
        self.canonicalize(&mut c);
        self.check_coords(&c)?;
        Ok(Point::from_coords(c))
    }

    fn check_point(&self, x: &Point) -> Result<()> {
        self.check_coords(x.coords())
    }

    fn metric_at(&self, x: &Point) -> Result<MetricData> {
        self.check_point(x)?;
        self.metric_raw(x.coords())
    }

    fn christoffel_at(&self, x: &Point) -> Result<Christoffel> {
        self.check_point(x)?;
        self.christoffel_raw(x.coords())
    }

    fn geodesic(&self, x: &Point, v: &TangentVector, t: f64) -> Result<Point> {
        self.check_point(x)?;
        if v.base != *x {
            return Err(Error::IncompatibleBase);
        }
        check_tangent(self, x.coords(), &v.comps)?;
        Ok(Point::from_coords(self.geodesic_raw(x.coords(), &v.comps, t)?))
    }

    fn log_map(&self, x: &Point, y: &Point) -> Result<TangentVector> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(TangentVector { base: x.clone(), comps: self.log_raw(x.coords(), y.coords())? })
    }

    fn distance(&self, x: &Point, y: &Point) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        self.distance_raw(x.coords(), y.coords())
    }

    fn frame_at(&self, x: &Point) -> Result<Vec<TangentVector>> {
        self.check_point(x)?;
        Ok(self
            .frame_raw(x.coords())?
            .into_iter()
            .map(|comps| TangentVector { base: x.clone(), comps })
            .collect())
    }

    /// Default interior point used when the caller does not supply one.
    fn default_point(&self) -> Point {
        let mut c: Coords = std::iter::repeat(0.0).take(self.coord_len()).collect();
        match self.builtin() {
            Some(ManifoldId::HyperbolicHalfPlane) => c[1] = 1.0,
            Some(ManifoldId::Sphere2) => c[2] = 1.0,
            _ => {}
        }
        Point::from_coords(c)
    }
}

fn check_tangent<M: Manifold + ?Sized>(m: &M, x: &[f64], v: &[f64]) -> Result<()> {
    if v.len() != m.coord_len() {
        return Err(Error::InvalidArgument(format!(
            "tangent vector has {} components, expected {}",
            v.len(),
            m.coord_len()
        )));
    }
    if m.builtin() == Some(ManifoldId::Sphere2) {
        let dot: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
        if dot.abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("vector not tangent to the sphere (<v,x> = {dot:e})")));
        }
    }
    Ok(())
}

/// Tags of the built-in manifolds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManifoldId {
    Euclidean(usize),
    Circle,
    Torus2,
    HyperbolicHalfPlane,
    Sphere2,
}

impl ManifoldId {
    pub fn euclidean(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("Euclidean dimension must be >= 1".into()));
        }
        Ok(ManifoldId::Euclidean(d))
    }

    pub fn shared(self) -> Arc<dyn Manifold> {
        Arc::new(self)
    }
}

impl fmt::Display for ManifoldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifoldId::Euclidean(d) => write!(f, "euclidean:{d}"),
            ManifoldId::Circle => f.write_str("circle"),
            ManifoldId::Torus2 => f.write_str("torus2"),
            ManifoldId::HyperbolicHalfPlane => f.write_str("hyperbolic-h2"),
            ManifoldId::Sphere2 => f.write_str("sphere2"),
        }
    }
}

impl FromStr for ManifoldId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "circle" => Ok(ManifoldId::Circle),
            "torus2" => Ok(ManifoldId::Torus2),
            "hyperbolic-h2" => Ok(ManifoldId::HyperbolicHalfPlane),
            "sphere2" => Ok(ManifoldId::Sphere2),
            _ => {
                let d = s
                    .strip_prefix("euclidean:")
                    .ok_or_else(|| Error::Parse(format!("unknown manifold '{s}'")))?;
                let d: usize = d.parse().map_err(|_| Error::Parse(format!("bad dimension in '{s}'")))?;
                ManifoldId::euclidean(d)
            }
        }
    }
}

fn unit(d: usize, k: usize, scale: f64) -> Coords {
    let mut c: Coords = std::iter::repeat(0.0).take(d).collect();
    c[k] = scale;
    c
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Orthonormal basis `(a, b)` of the tangent plane of the unit sphere at `x`,
/// with `a × b = x`.
pub fn sphere_tangent_basis(x: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut k = 0;
    for i in 1..3 {
        if x[i].abs() < x[k].abs() {
            k = i;
        }
    }
    let mut e = [0.0; 3];
    e[k] = 1.0;
    let ex = dot(&e, x);
    let mut a = [e[0] - ex * x[0], e[1] - ex * x[1], e[2] - ex * x[2]];
    let na = dot(&a, &a).sqrt();
    a.iter_mut().for_each(|v| *v /= na);
    let b = cross(x, &a);
    (a, b)
}

impl Manifold for ManifoldId {
    fn label(&self) -> String {
        self.to_string()
    }

    fn dim(&self) -> usize {
        match self {
            ManifoldId::Euclidean(d) => *d,
            ManifoldId::Circle => 1,
            ManifoldId::Torus2 | ManifoldId::HyperbolicHalfPlane | ManifoldId::Sphere2 => 2,
        }
    }

    fn coord_len(&self) -> usize {
        match self {
            ManifoldId::Sphere2 => 3,
            _ => self.dim(),
        }
    }

    fn coord_names(&self) -> Vec<String> {
        match self {
            ManifoldId::Euclidean(d) => (1..=*d).map(|i| format!("x{i}")).collect(),
            ManifoldId::Circle => vec!["theta".into()],
            ManifoldId::Torus2 => vec!["theta1".into(), "theta2".into()],
            ManifoldId::HyperbolicHalfPlane => vec!["x".into(), "y".into()],
            ManifoldId::Sphere2 => vec!["x".into(), "y".into(), "z".into()],
        }
    }

    fn builtin(&self) -> Option<ManifoldId> {
        Some(*self)
    }

    fn is_compact(&self) -> bool {
        matches!(self, ManifoldId::Circle | ManifoldId::Torus2 | ManifoldId::Sphere2)
    }

    fn is_flat(&self) -> bool {
        matches!(self, ManifoldId::Euclidean(_) | ManifoldId::Circle | ManifoldId::Torus2)
    }

    fn has_global_chart(&self) -> bool {
        !matches!(self, ManifoldId::Sphere2)
    }

    fn check_coords(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.coord_len() {
            return Err(Error::InvalidPoint(format!(
                "{self} expects {} coordinates, got {}",
                self.coord_len(),
                c.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPoint(format!("non-finite coordinates {c:?}")));
        }
        match self {
            ManifoldId::Euclidean(_) => Ok(()),
            ManifoldId::Circle | ManifoldId::Torus2 => {
                if c.iter().all(|a| (0.0..TAU).contains(a)) {
                    Ok(())
                } else {
                    Err(Error::InvalidPoint(format!("angles {c:?} not reduced to [0, 2π)")))
                }
            }
            ManifoldId::HyperbolicHalfPlane => {
                if c[1] > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidPoint(format!("half-plane point {c:?} needs y > 0")))
                }
            }
            ManifoldId::Sphere2 => {
                let n = dot(c, c).sqrt();
                if (n - 1.0).abs() <= 1e-12 {
                    Ok(())
                } else {
                    Err(Error::InvalidPoint(format!("sphere point {c:?} has norm {n}")))
                }
            }
        }
    }

    fn canonicalize(&self, c: &mut Coords) {
        match self {
            ManifoldId::Circle | ManifoldId::Torus2 => c.iter_mut().for_each(|a| *a = wrap_angle(*a)),
            ManifoldId::Sphere2 => {
                let n = dot(c, c).sqrt();
                if n > 0.0 {
                    c.iter_mut().for_each(|v| *v /= n);
                }
            }
            _ => {}
        }
    }

    fn project_tangent(&self, x: &[f64], v: &mut Coords) {
        if let ManifoldId::Sphere2 = self {
            let d = dot(x, v);
            v.iter_mut().zip(x).for_each(|(vi, xi)| *vi -= d * xi);
        }
    }

    fn metric_raw(&self, x: &[f64]) -> Result<MetricData> {
        let d = self.dim();
        match self {
            ManifoldId::HyperbolicHalfPlane => {
                let y2 = x[1] * x[1];
                Ok(MetricData {
                    g: DMatrix::identity(2, 2) / y2,
                    g_inv: DMatrix::identity(2, 2) * y2,
                    sqrt_det: 1.0 / y2,
                })
            }
            _ => Ok(MetricData { g: DMatrix::identity(d, d), g_inv: DMatrix::identity(d, d), sqrt_det: 1.0 }),
        }
    }

    fn christoffel_raw(&self, x: &[f64]) -> Result<Christoffel> {
        let mut gamma = Christoffel::zeros(self.dim());
        if let ManifoldId::HyperbolicHalfPlane = self {
            let inv_y = 1.0 / x[1];
            gamma.set_symmetric(0, 0, 1, -inv_y);
            gamma.set(1, 0, 0, inv_y);
            gamma.set(1, 1, 1, -inv_y);
        }
        Ok(gamma)
    }

    fn inner(&self, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        match self {
            ManifoldId::HyperbolicHalfPlane => dot(u, v) / (x[1] * x[1]),
            _ => dot(u, v),
        }
    }

    fn geodesic_raw(&self, x: &[f64], v: &[f64], t: f64) -> Result<Coords> {
        match self {
            ManifoldId::Euclidean(_) => Ok(x.iter().zip(v).map(|(a, b)| a + b * t).collect()),
            ManifoldId::Circle | ManifoldId::Torus2 => {
                Ok(x.iter().zip(v).map(|(a, b)| wrap_angle(a + b * t)).collect())
            }
            ManifoldId::HyperbolicHalfPlane => Ok(hyperbolic_geodesic(x, v, t)),
            ManifoldId::Sphere2 => {
                let s = dot(v, v).sqrt();
                if s == 0.0 {
                    return Ok(x.iter().copied().collect());
                }
                let (c, sn) = ((s * t).cos(), (s * t).sin());
                let mut out: Coords = x.iter().zip(v).map(|(a, b)| a * c + b / s * sn).collect();
                self.canonicalize(&mut out);
                Ok(out)
            }
        }
    }

    fn log_raw(&self, x: &[f64], y: &[f64]) -> Result<Coords> {
        match self {
            ManifoldId::Euclidean(_) => Ok(x.iter().zip(y).map(|(a, b)| b - a).collect()),
            ManifoldId::Circle | ManifoldId::Torus2 => x
                .iter()
                .zip(y)
                .map(|(a, b)| {
                    let dlt = signed_angle_diff(*a, *b);
                    if dlt <= -PI {
                        Err(Error::BeyondInjectivityRadius)
                    } else {
                        Ok(dlt)
                    }
                })
                .collect(),
            ManifoldId::HyperbolicHalfPlane => Ok(hyperbolic_log(x, y)),
            ManifoldId::Sphere2 => {
                let c = dot(x, y);
                let w = [y[0] - c * x[0], y[1] - c * x[1], y[2] - c * x[2]];
                let sn = dot(&w, &w).sqrt();
                if sn < 1e-14 {
                    if c < 0.0 {
                        return Err(Error::BeyondInjectivityRadius);
                    }
                    return Ok(Coords::from_slice(&[0.0, 0.0, 0.0]));
                }
                let theta = sn.atan2(c);
                Ok(w.iter().map(|wi| theta * wi / sn).collect())
            }
        }
    }

    fn distance_raw(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(match self {
            ManifoldId::Euclidean(_) => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            ManifoldId::Circle | ManifoldId::Torus2 => x
                .iter()
                .zip(y)
                .map(|(a, b)| {
                    // symmetric in (a, b) to the last bit
                    let r = (b - a).abs().rem_euclid(TAU);
                    let dl = r.min(TAU - r);
                    dl * dl
                })
                .sum::<f64>()
                .sqrt(),
            ManifoldId::HyperbolicHalfPlane => {
                let (dx, dy) = (x[0] - y[0], x[1] - y[1]);
                2.0 * ((dx * dx + dy * dy) / (4.0 * (x[1] * y[1]))).sqrt().asinh()
            }
            ManifoldId::Sphere2 => {
                let cr = cross(x, y);
                dot(&cr, &cr).sqrt().atan2(dot(x, y))
            }
        })
    }

    fn frame_raw(&self, x: &[f64]) -> Result<Vec<Coords>> {
        let d = self.dim();
        match self {
            ManifoldId::Sphere2 => Err(Error::NotParallelizable(self.to_string())),
            ManifoldId::HyperbolicHalfPlane => Ok(vec![unit(2, 0, x[1]), unit(2, 1, x[1])]),
            _ => Ok((0..d).map(|k| unit(d, k, 1.0)).collect()),
        }
    }

    fn chart_basis(&self, center: &[f64]) -> Vec<Coords> {
        match self {
            ManifoldId::Sphere2 => {
                let (a, b) = sphere_tangent_basis(center);
                vec![Coords::from_slice(&a), Coords::from_slice(&b)]
            }
            _ => {
                let d = self.dim();
                (0..d).map(|k| unit(d, k, 1.0)).collect()
            }
        }
    }

    fn chart_components(&self, center: &[f64], v: &[f64]) -> Coords {
        match self {
            ManifoldId::Sphere2 => {
                let (a, b) = sphere_tangent_basis(center);
                Coords::from_slice(&[dot(&a, v), dot(&b, v)])
            }
            _ => v.iter().copied().collect(),
        }
    }

    fn chart_point(&self, center: &[f64], u: &[f64]) -> Coords {
        match self {
            ManifoldId::Sphere2 => {
                let (a, b) = sphere_tangent_basis(center);
                let h = (1.0 - u[0] * u[0] - u[1] * u[1]).max(0.0).sqrt();
                let mut p: Coords = (0..3).map(|i| u[0] * a[i] + u[1] * b[i] + h * center[i]).collect();
                self.canonicalize(&mut p);
                p
            }
            _ => {
                let mut p: Coords = center.iter().zip(u).map(|(c, du)| c + du).collect();
                self.canonicalize(&mut p);
                p
            }
        }
    }

    fn grad_log_sqrt_det(&self, center: &[f64]) -> Coords {
        match self {
            ManifoldId::HyperbolicHalfPlane => Coords::from_slice(&[0.0, -2.0 / center[1]]),
            _ => std::iter::repeat(0.0).take(self.dim()).collect(),
        }
    }
}

/// Hyperbolic geodesic from `x` with velocity `v`, via the hyperboloid model.
fn hyperbolic_geodesic(x: &[f64], v: &[f64], t: f64) -> Coords {
    let (x0, y0) = (x[0], x[1]);
    let (vx, vy) = (v[0], v[1]);
    let vn = (vx * vx + vy * vy).sqrt();
    if vn == 0.0 || t == 0.0 {
        return Coords::from_slice(x);
    }
    let s = vn / y0;
    let (ch, sh) = ((s * t).cosh(), (s * t).sinh());
    // 1/y(t) = cosh(st)/y0 - sinh(st) vy / (|v| y0)
    let denom = ch - sh * vy / vn;
    let y = y0 / denom;
    let x_new = (y / y0) * (x0 * ch + sh * (vx * y0 - vy * x0) / vn);
    Coords::from_slice(&[x_new, y])
}

fn to_hyperboloid(p: &[f64]) -> [f64; 3] {
    let (x, y) = (p[0], p[1]);
    let a = x * x + y * y;
    [(a + 1.0) / (2.0 * y), (a - 1.0) / (2.0 * y), x / y]
}

fn hyperbolic_log(p: &[f64], q: &[f64]) -> Coords {
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let rho = 2.0 * ((dx * dx + dy * dy) / (4.0 * p[1] * q[1])).sqrt().asinh();
    if rho == 0.0 {
        return Coords::from_slice(&[0.0, 0.0]);
    }
    let big_p = to_hyperboloid(p);
    let big_q = to_hyperboloid(q);
    let ch = rho.cosh();
    let scale = rho / rho.sinh();
    let u: Vec<f64> = (0..3).map(|i| (big_q[i] - ch * big_p[i]) * scale).collect();
    let (x, y) = (p[0], p[1]);
    // invert the differential of the half-plane -> hyperboloid map
    let vy = -y * y * (u[0] - u[1]);
    let vx = y * u[2] + vy * x / y;
    Coords::from_slice(&[vx, vy])
}

type MetricFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A user-supplied metric on a single global chart `ℝ^d`.
///
/// Christoffel symbols come from central finite differences of the metric
/// and geodesics from numerical integration of the geodesic equation. No
/// log map or distance is available, so these manifolds only support the
/// pointwise Chernoff strategies.
#[derive(Clone)]
pub struct MetricManifold {
    label: String,
    dim: usize,
    metric: Arc<MetricFn>,
    ode: OdeSettings,
}

impl fmt::Debug for MetricManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricManifold").field("label", &self.label).field("dim", &self.dim).finish()
    }
}

impl MetricManifold {
    pub fn new<F>(label: impl Into<String>, dim: usize, metric: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        Ok(MetricManifold { label: label.into(), dim, metric: Arc::new(metric), ode: OdeSettings::default() })
    }

    pub fn with_ode(mut self, ode: OdeSettings) -> Self {
        self.ode = ode;
        self
    }

    fn metric_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        (self.metric)(x)
    }

    fn metric_derivative(&self, x: &[f64], k: usize) -> DMatrix<f64> {
        let h = fd_step(x);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        (self.metric_matrix(&xp) - self.metric_matrix(&xm)) / (2.0 * h)
    }
}

impl Manifold for MetricManifold {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn coord_names(&self) -> Vec<String> {
        (1..=self.dim).map(|i| format!("x{i}")).collect()
    }

    fn is_compact(&self) -> bool {
        false
    }

    fn is_flat(&self) -> bool {
        false
    }

    fn check_coords(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.dim || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPoint(format!("{} expects {} finite coordinates", self.label, self.dim)));
        }
        Ok(())
    }

    fn canonicalize(&self, _c: &mut Coords) {}

    fn metric_raw(&self, x: &[f64]) -> Result<MetricData> {
        MetricData::from_metric(self.metric_matrix(x))
    }

    fn christoffel_raw(&self, x: &[f64]) -> Result<Christoffel> {
        let d = self.dim;
        let g_inv = self.metric_raw(x)?.g_inv;
        let dg: Vec<DMatrix<f64>> = (0..d).map(|k| self.metric_derivative(x, k)).collect();
        let mut gamma = Christoffel::zeros(d);
        for a in 0..d {
            for b in 0..d {
                for c in b..d {
                    let mut s = 0.0;
                    for e in 0..d {
                        s += g_inv[(a, e)] * (dg[b][(e, c)] + dg[c][(e, b)] - dg[e][(b, c)]);
                    }
                    gamma.set_symmetric(a, b, c, 0.5 * s);
                }
            }
        }
        Ok(gamma)
    }

    fn inner(&self, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let g = self.metric_matrix(x);
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += g[(i, j)] * u[i] * v[j];
            }
        }
        s
    }

    fn geodesic_raw(&self, x: &[f64], v: &[f64], t: f64) -> Result<Coords> {
        ode::numerical_geodesic(self, x, v, t, &self.ode)
    }

    fn log_raw(&self, _x: &[f64], _y: &[f64]) -> Result<Coords> {
        Err(Error::Unsupported(format!("log map on user-supplied manifold {}", self.label)))
    }

    fn distance_raw(&self, _x: &[f64], _y: &[f64]) -> Result<f64> {
        Err(Error::Unsupported(format!("distance on user-supplied manifold {}", self.label)))
    }

    /// Gram–Schmidt on the coordinate basis: smooth on the single global chart.
    fn frame_raw(&self, x: &[f64]) -> Result<Vec<Coords>> {
        let d = self.dim;
        let mut frame: Vec<Coords> = Vec::with_capacity(d);
        for k in 0..d {
            let mut v = unit(d, k, 1.0);
            for e in &frame {
                let p = self.inner(x, &v, e);
                v.iter_mut().zip(e).for_each(|(vi, ei)| *vi -= p * ei);
            }
            let n = self.norm(x, &v);
            v.iter_mut().for_each(|vi| *vi /= n);
            frame.push(v);
        }
        Ok(frame)
    }

    fn chart_basis(&self, _center: &[f64]) -> Vec<Coords> {
        (0..self.dim).map(|k| unit(self.dim, k, 1.0)).collect()
    }

    fn chart_components(&self, _center: &[f64], v: &[f64]) -> Coords {
        v.iter().copied().collect()
    }

    fn chart_point(&self, center: &[f64], u: &[f64]) -> Coords {
        center.iter().zip(u).map(|(c, du)| c + du).collect()
    }

    fn grad_log_sqrt_det(&self, center: &[f64]) -> Coords {
        let h = fd_step(center);
        (0..self.dim)
            .map(|k| {
                let mut xp = center.to_vec();
                let mut xm = center.to_vec();
                xp[k] += h;
                xm[k] -= h;
                let lp = self.metric_matrix(&xp).determinant().ln();
                let lm = self.metric_matrix(&xm).determinant().ln();
                0.25 * (lp - lm) / h
            })
            .collect()
    }
}
