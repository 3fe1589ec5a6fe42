//! Explicit Runge–Kutta integration for autonomous systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Coords, Manifold};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdeMethod {
    Rk4Fixed,
    Rk45Adaptive,
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" | "rk4fixed" | "rk4-fixed" => Ok(OdeMethod::Rk4Fixed),
            "rk45" | "rk45adaptive" | "rk45-adaptive" | "dopri5" => Ok(OdeMethod::Rk45Adaptive),
            _ => Err(Error::Parse(format!("unknown ODE method '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeSettings {
    pub method: OdeMethod,
    /// Initial (adaptive) or fixed (RK4) step. `None` means `t/16`.
    pub h_init: Option<f64>,
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for OdeSettings {
    fn default() -> Self {
        OdeSettings { method: OdeMethod::Rk45Adaptive, h_init: None, tol: 1e-9, max_steps: 1_000_000 }
    }
}

impl OdeSettings {
    pub fn rk4(h: f64) -> Self {
        OdeSettings { method: OdeMethod::Rk4Fixed, h_init: Some(h), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("ODE tolerance must be > 0, got {}", self.tol)));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        if let Some(h) = self.h_init {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument(format!("h_init must be > 0, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeOutcome {
    pub y: Vec<f64>,
    pub steps: usize,
    pub est_error: f64,
}

// Dormand–Prince 5(4) tableau
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `y' = rhs(y)` from 0 to `t`. `post_step` may project the state
/// back onto a constraint set after each accepted step.
pub fn integrate<F, P>(mut rhs: F, y0: &[f64], t: f64, s: &OdeSettings, mut post_step: P) -> Result<OdeOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    P: FnMut(&mut [f64]),
{
    s.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("integration time must be finite and >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(OdeOutcome { y: y0.to_vec(), steps: 0, est_error: 0.0 });
    }
    match s.method {
        OdeMethod::Rk45Adaptive => dopri5(&mut rhs, y0, t, s, &mut post_step),
        OdeMethod::Rk4Fixed => {
            let h = s.h_init.unwrap_or(t / 16.0);
            let n = ((t / h).ceil() as usize).max(1);
            if n > s.max_steps {
                return Err(Error::StepLimitExceeded { max_steps: s.max_steps, reached: 0.0, target: t });
            }
            let fine = rk4_fixed(&mut rhs, y0, t, n, &mut post_step)?;
            // Richardson estimate from a half-resolution run
            let est_error = if n >= 2 {
                let coarse = rk4_fixed(&mut rhs, y0, t, n / 2, &mut post_step)?;
                let r = (n as f64 / (n / 2) as f64).powi(4);
                fine.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / (r - 1.0)
            } else {
                0.0
            };
            Ok(OdeOutcome { y: fine, steps: n, est_error })
        }
    }
}

fn rk4_fixed<F, P>(rhs: &mut F, y0: &[f64], t: f64, n: usize, post: &mut P) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    P: FnMut(&mut [f64]),
{
    let m = y0.len();
    let h = t / n as f64;
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    for _ in 0..n {
        rhs(&y, &mut k1)?;
        for i in 0..m {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        rhs(&tmp, &mut k2)?;
        for i in 0..m {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        rhs(&tmp, &mut k3)?;
        for i in 0..m {
            tmp[i] = y[i] + h * k3[i];
        }
        rhs(&tmp, &mut k4)?;
        for i in 0..m {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        post(&mut y);
    }
    Ok(y)
}

fn dopri5<F, P>(rhs: &mut F, y0: &[f64], t: f64, s: &OdeSettings, post: &mut P) -> Result<OdeOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    P: FnMut(&mut [f64]),
{
    let m = y0.len();
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; m]; 7];
    let mut tmp = vec![0.0; m];
    let mut ynew = vec![0.0; m];
    let mut h = s.h_init.unwrap_or(t / 16.0).min(t);
    let mut time = 0.0;
    let mut steps = 0usize;
    let mut est_error = 0.0;

    while time < t {
        if steps >= s.max_steps {
            return Err(Error::StepLimitExceeded { max_steps: s.max_steps, reached: time, target: t });
        }
        steps += 1;
        let last = time + h >= t;
        if last {
            h = t - time;
        }
        for stage in 0..7 {
            for i in 0..m {
                let mut acc = y[i];
                for j in 0..stage {
                    acc += h * A[stage][j] * k[j][i];
                }
                tmp[i] = acc;
            }
            rhs(&tmp, &mut k[stage])?;
        }
        // the 7th stage argument is the 5th-order solution
        ynew.copy_from_slice(&tmp);
        let mut err = 0.0f64;
        for i in 0..m {
            let mut e = 0.0;
            for j in 0..7 {
                e += E[j] * k[j][i];
            }
            err = err.max((h * e).abs());
        }
        if !err.is_finite() || ynew.iter().any(|v| !v.is_finite()) {
            h *= 0.2;
            if h < f64::EPSILON * t {
                return Err(Error::StepLimitExceeded { max_steps: s.max_steps, reached: time, target: t });
            }
            continue;
        }
        let allowed = s.tol * h;
        if err <= allowed {
            time = if last { t } else { time + h };
            y.copy_from_slice(&ynew);
            post(&mut y);
            est_error += err;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * (allowed / err).powf(0.25)).clamp(0.2, 5.0) };
        h *= factor;
        if time < t && h < f64::EPSILON * t.max(1.0) {
            return Err(Error::StepLimitExceeded { max_steps: s.max_steps, reached: time, target: t });
        }
    }
    Ok(OdeOutcome { y, steps, est_error })
}

/// Integrates the geodesic equation `γ̈^k = −Γ^k_{ij} γ̇^i γ̇^j` in the
/// manifold's global chart.
pub fn numerical_geodesic<M: Manifold + ?Sized>(
    m: &M,
    x: &[f64],
    v: &[f64],
    t: f64,
    s: &OdeSettings,
) -> Result<Coords> {
    if !m.has_global_chart() {
        return Err(Error::Unsupported(format!("numerical geodesics on {} (no global chart)", m.label())));
    }
    let d = m.dim();
    let mut y0 = Vec::with_capacity(2 * d);
    y0.extend_from_slice(x);
    y0.extend_from_slice(v);
    let out = integrate(
        |y, dy| {
            let gamma = m.christoffel_raw(&y[..d])?;
            for k in 0..d {
                dy[k] = y[d + k];
                let mut acc = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        acc += gamma.get(k, i, j) * y[d + i] * y[d + j];
                    }
                }
                dy[d + k] = -acc;
            }
            Ok(())
        },
        &y0,
        t,
        s,
        |_| {},
    )?;
    let mut c: Coords = out.y[..d].iter().copied().collect();
    m.canonicalize(&mut c);
    Ok(c)
}
