//! Integral curves of vector fields and the monotone-distance horizon.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::manifold::{Coords, Point};
pub use crate::ode::{OdeMethod, OdeSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub endpoint: Point,
    pub steps_taken: usize,
    pub est_error: f64,
}

/// `γ_{x,A}(t)` for `t ≥ 0`.
pub fn integral_curve(a: &VectorField, x: &Point, t: f64, s: &OdeSettings) -> Result<FlowResult> {
    a.manifold().check_point(x)?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("flow time must be >= 0, got {t}")));
    }
    let (endpoint, steps_taken, est_error) = flow_detailed(a, x.coords(), t, s)?;
    Ok(FlowResult { endpoint: Point::from_coords(endpoint), steps_taken, est_error })
}

/// Flow for a signed time (negative times run the flow backwards). No point validation.
pub fn flow_raw(a: &VectorField, x: &[f64], t: f64, s: &OdeSettings) -> Result<Coords> {
    flow_detailed(a, x, t, s).map(|r| r.0)
}

fn flow_detailed(a: &VectorField, x: &[f64], t: f64, s: &OdeSettings) -> Result<(Coords, usize, f64)> {
    let m = a.manifold();
    if t == 0.0 || a.is_zero() {
        return Ok((Coords::from_slice(x), 0, 0.0));
    }
    if let Some(mut y) = a.exact_flow_raw(x, t) {
        m.canonicalize(&mut y);
        return Ok((y, 0, 0.0));
    }
    let v0 = a.eval_raw(x);
    // a zero of the field is a stationary point
    if v0.iter().all(|c| *c == 0.0) {
        return Ok((Coords::from_slice(x), 0, 0.0));
    }
    let sign = t.signum();
    let out = crate::ode::integrate(
        |y, dy| {
            let v = a.eval_raw(y);
            for (d, vi) in dy.iter_mut().zip(&v) {
                *d = sign * vi;
            }
            Ok(())
        },
        x,
        t.abs(),
        s,
        |y| {
            let mut c = Coords::from_slice(y);
            m.canonicalize(&mut c);
            y.copy_from_slice(&c);
        },
    )?;
    let mut y = Coords::from_vec(out.y);
    m.canonicalize(&mut y);
    Ok((y, out.steps, out.est_error))
}

/// `T = ln(1 + 1/d) / (M2 √d)`, the supremum of times for which the distance
/// travelled along an integral curve is guaranteed non-decreasing.
pub fn monotone_distance_horizon(m2: f64, d: usize) -> Result<f64> {
    if !(m2 > 0.0) {
        return Err(Error::NonpositiveM2(m2));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let d = d as f64;
    Ok((1.0 + 1.0 / d).ln() / (m2 * d.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub violations: usize,
    /// Largest drop `d(t_{i-1}) - d(t_i)` observed (0 if none).
    pub worst_decrease: f64,
    pub t_end: f64,
    pub steps: usize,
    pub starts: usize,
    /// Caller-supplied chart-level derivative bound, if any.
    pub m2: Option<f64>,
    pub horizon: Option<f64>,
    pub within_horizon: Option<bool>,
}

pub const MONOTONICITY_TOL: f64 = 1e-9;

/// Samples `t ↦ d(γ(0), γ(t))` at `steps` equispaced times in `[0, T]` for each
/// start and counts decreases larger than `1e-9`.
pub fn verify_distance_monotonicity(
    a: &VectorField,
    starts: &[Point],
    t_end: f64,
    steps: usize,
    m2: Option<f64>,
    s: &OdeSettings,
) -> Result<MonotonicityReport> {
    if steps < 2 {
        return Err(Error::InvalidArgument("need at least 2 sample times".into()));
    }
    if !(t_end >= 0.0) {
        return Err(Error::InvalidArgument(format!("T must be >= 0, got {t_end}")));
    }
    let m = a.manifold();
    let horizon = match m2 {
        Some(v) => Some(monotone_distance_horizon(v, m.dim())?),
        None => None,
    };
    let dt = t_end / (steps - 1) as f64;
    let mut violations = 0;
    let mut worst = 0.0f64;
    for x0 in starts {
        m.check_point(x0)?;
        let mut cur = Coords::from_slice(x0.coords());
        let mut prev = 0.0;
        for _ in 1..steps {
            cur = flow_raw(a, &cur, dt, s)?;
            let dist = m.distance_raw(x0.coords(), &cur)?;
            let drop = prev - dist;
            if drop > MONOTONICITY_TOL {
                violations += 1;
            }
            worst = worst.max(drop);
            prev = dist;
        }
    }
    Ok(MonotonicityReport {
        violations,
        worst_decrease: worst,
        t_end,
        steps,
        starts: starts.len(),
        m2,
        horizon,
        within_horizon: horizon.map(|h| t_end < h),
    })
}
