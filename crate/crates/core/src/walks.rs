//! Random walks whose expectations are the Chernoff iterates.
//!
//! * `Jump`: the chain `X_n`, piecewise constant, jumping at times `m/n`.
//! * `GeodesicInterp`: `Z_n`, consecutive skeleton points joined by the
//!   shortest geodesic.
//! * `FlowInterp`: `Z̃_n`, which follows the chosen integral curve during the
//!   step, reparametrized by `τ`.
//!
//! All three share one skeleton for a given seed. Step `m` draws
//! `ξ ∈ {0, .., 2r}` with `P(0) = 1/2` and `P(k) = 1/(4r)`; `ξ = 0` follows
//! `A_0`, odd `k` follows `+A_{(k+1)/2}`, even `k` follows `-A_{k/2}`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{GeneratorSpec, ScalarField, VectorField};
use crate::flows::flow_raw;
use crate::manifold::{Coords, Manifold, Point};
use crate::ode::OdeSettings;
use crate::rng::{compensated_sum, mean_stderr, substream, substream_seed};

/// Stored points per step for the interpolated kinds.
pub const SUBSAMPLES_PER_STEP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Jump,
    #[serde(alias = "geodesic")]
    GeodesicInterp,
    #[serde(alias = "flow")]
    FlowInterp,
}

impl std::str::FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jump" => Ok(PathKind::Jump),
            "geodesic" | "geodesic-interp" => Ok(PathKind::GeodesicInterp),
            "flow" | "flow-interp" => Ok(PathKind::FlowInterp),
            other => Err(Error::Parse(format!("unknown path kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub kind: PathKind,
    pub times: Vec<f64>,
    pub points: Vec<Point>,
    pub n: usize,
    pub seed_path: u64,
}

impl PathSample {
    /// Points at the skeleton times `m/n`, `m = 0..=⌊n t_max⌋`.
    pub fn skeleton(&self) -> Vec<&Point> {
        let stride = match self.kind {
            PathKind::Jump => 1,
            _ => SUBSAMPLES_PER_STEP,
        };
        let steps = match self.kind {
            PathKind::Jump => self.points.len() - 1,
            _ => (self.points.len() - 1) / stride,
        };
        (0..=steps).map(|m| &self.points[m * stride]).collect()
    }
}

/// One branch of the step law.
#[derive(Clone, Debug, PartialEq)]
pub enum StepMove {
    /// Flow along `sign · A_field` (1-based) for time `√(2r/n)`.
    Field { field: usize, sign: i8, time: f64 },
    /// Flow along `A_0` for time `2/n`.
    Drift { time: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDistribution {
    /// Indexed by `ξ`.
    pub branches: Vec<(StepMove, f64)>,
}

impl StepDistribution {
    pub fn new(r: usize, n: usize) -> Self {
        let mut branches = vec![(StepMove::Drift { time: tau(0, 1.0 / n as f64, r) }, 0.5)];
        let p = 1.0 / (4 * r) as f64;
        for k in 1..=2 * r {
            let (field, sign) = xi_field(k);
            branches.push((StepMove::Field { field, sign, time: tau(k, 1.0 / n as f64, r) }, p));
        }
        StepDistribution { branches }
    }

    pub fn total(&self) -> f64 {
        // 1/2 + 2r · 1/(4r) rounds to exactly 1 when summed without cancellation loss
        compensated_sum(self.branches.iter().map(|b| b.1))
    }
}

/// `(field index (1-based), sign)` for `ξ = k ≥ 1`.
pub fn xi_field(k: usize) -> (usize, i8) {
    if k % 2 == 1 {
        ((k + 1) / 2, 1)
    } else {
        (k / 2, -1)
    }
}

/// Reparametrization: `τ(0, s) = 2s`, `τ(k, s) = √(2rs)` for `k ≥ 1`.
pub fn tau(k: usize, s: f64, r: usize) -> f64 {
    if k == 0 {
        2.0 * s
    } else {
        (2.0 * r as f64 * s).sqrt()
    }
}

/// Draws `ξ` from one uniform variate.
pub fn draw_xi(rng: &mut ChaCha8Rng, r: usize) -> usize {
    let u: f64 = rng.random();
    if u < 0.5 {
        0
    } else {
        (1 + ((u - 0.5) * (4 * r) as f64) as usize).min(2 * r)
    }
}

struct Walker<'a> {
    spec: &'a GeneratorSpec,
    negated: Vec<VectorField>,
    ode: OdeSettings,
    n: usize,
}

impl<'a> Walker<'a> {
    fn new(spec: &'a GeneratorSpec, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        Ok(Walker { spec, negated: spec.fields().iter().map(VectorField::negated).collect(), ode: OdeSettings::default(), n })
    }

    fn field(&self, k: usize) -> &VectorField {
        if k == 0 {
            return self.spec.drift();
        }
        let (j, sign) = xi_field(k);
        if sign > 0 {
            &self.spec.fields()[j - 1]
        } else {
            &self.negated[j - 1]
        }
    }

    /// Position after elapsed time `s ∈ [0, 1/n]` within a step with label `k`.
    fn step(&self, y: &[f64], k: usize, s: f64) -> Result<Coords> {
        let r = self.spec.r();
        flow_raw(self.field(k), y, tau(k, s, r), &self.ode)
    }

    fn h(&self) -> f64 {
        1.0 / self.n as f64
    }
}

fn validate_horizon(t_max: f64) -> Result<()> {
    if !(t_max >= 0.0) || !t_max.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be finite and >= 0, got {t_max}")));
    }
    Ok(())
}

fn steps_for(t: f64, n: usize) -> usize {
    // tolerate t·n landing a hair below an integer
    let v = t * n as f64;
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.floor() as usize
    }
}

/// Skeleton positions and labels: `(y_0..y_M, ξ_1..ξ_M)` with `M = ⌊n t⌋`.
fn skeleton(w: &Walker, x: &[f64], steps: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Coords>, Vec<usize>)> {
    let r = w.spec.r();
    let mut ys = Vec::with_capacity(steps + 1);
    let mut xis = Vec::with_capacity(steps);
    ys.push(Coords::from_slice(x));
    for _ in 0..steps {
        let k = draw_xi(rng, r);
        let next = w.step(ys.last().unwrap(), k, w.h())?;
        ys.push(next);
        xis.push(k);
    }
    Ok((ys, xis))
}

/// `X_n` on `[0, t_max]`.
pub fn sample_jump_path(spec: &GeneratorSpec, x: &Point, t_max: f64, n: usize, seed: u64) -> Result<PathSample> {
    spec.manifold().check_point(x)?;
    validate_horizon(t_max)?;
    let w = Walker::new(spec, n)?;
    let steps = steps_for(t_max, n);
    let mut rng = substream(seed, 0);
    let (ys, _) = skeleton(&w, x.coords(), steps, &mut rng)?;
    let times = (0..=steps).map(|m| m as f64 / n as f64).collect();
    Ok(PathSample {
        kind: PathKind::Jump,
        times,
        points: ys.into_iter().map(Point::from_coords).collect(),
        n,
        seed_path: seed,
    })
}

fn interp_path<F>(w: &Walker, x: &Point, t_max: f64, seed: u64, kind: PathKind, mut segment: F) -> Result<PathSample>
where
    F: FnMut(&[f64], &[f64], usize, f64) -> Result<Coords>,
{
    let n = w.n;
    let steps = steps_for(t_max, n);
    let mut rng = substream(seed, 0);
    let (ys, xis) = skeleton(w, x.coords(), steps, &mut rng)?;
    let h = w.h();
    let sub = h / SUBSAMPLES_PER_STEP as f64;
    let mut times = Vec::new();
    let mut points = Vec::new();
    for m in 0..steps {
        for q in 0..SUBSAMPLES_PER_STEP {
            times.push(m as f64 * h + q as f64 * sub);
            if q == 0 {
                points.push(Point::from_coords(ys[m].clone()));
            } else {
                points.push(Point::from_coords(segment(&ys[m], &ys[m + 1], xis[m], q as f64 * sub)?));
            }
        }
    }
    times.push(steps as f64 * h);
    points.push(Point::from_coords(ys[steps].clone()));
    // final partial interval, traversed proportionally along one more step
    let rest = t_max - steps as f64 * h;
    if rest > 1e-12 * h {
        let k = draw_xi(&mut rng, w.spec.r());
        let last = &ys[steps];
        let full = w.step(last, k, h)?;
        let q_max = (rest / sub).ceil() as usize;
        for q in 1..=q_max {
            let s = (q as f64 * sub).min(rest);
            times.push(steps as f64 * h + s);
            points.push(Point::from_coords(segment(last, &full, k, s)?));
        }
    }
    Ok(PathSample { kind, times, points, n, seed_path: seed })
}

/// `Z_n`: the jump skeleton joined by shortest geodesics.
pub fn sample_geodesic_interp(spec: &GeneratorSpec, x: &Point, t_max: f64, n: usize, seed: u64) -> Result<PathSample> {
    spec.manifold().check_point(x)?;
    validate_horizon(t_max)?;
    let w = Walker::new(spec, n)?;
    let m = spec.manifold().clone();
    let h = w.h();
    interp_path(&w, x, t_max, seed, PathKind::GeodesicInterp, |a, b, _, s| {
        let v = m.log_raw(a, b)?;
        m.geodesic_raw(a, &v, s / h)
    })
}

/// `Z̃_n`: each step follows its integral curve, reparametrized by `τ`.
pub fn sample_flow_interp(spec: &GeneratorSpec, x: &Point, t_max: f64, n: usize, seed: u64) -> Result<PathSample> {
    spec.manifold().check_point(x)?;
    validate_horizon(t_max)?;
    let w = Walker::new(spec, n)?;
    interp_path(&w, x, t_max, seed, PathKind::FlowInterp, |a, _, k, s| w.step(a, k, s))
}

pub fn sample_path(kind: PathKind, spec: &GeneratorSpec, x: &Point, t_max: f64, n: usize, seed: u64) -> Result<PathSample> {
    match kind {
        PathKind::Jump => sample_jump_path(spec, x, t_max, n, seed),
        PathKind::GeodesicInterp => sample_geodesic_interp(spec, x, t_max, n, seed),
        PathKind::FlowInterp => sample_flow_interp(spec, x, t_max, n, seed),
    }
}

/// Seed of path `index` in a batch with master seed `seed`.
pub fn path_seed(seed: u64, index: u64) -> u64 {
    substream_seed(seed, index)
}

/// Endpoints `X_n(t)` of `paths` independent walks.
pub fn sample_endpoints(spec: &GeneratorSpec, x: &Point, t: f64, n: usize, paths: usize, seed: u64) -> Result<Vec<Coords>> {
    spec.manifold().check_point(x)?;
    validate_horizon(t)?;
    let w = Walker::new(spec, n)?;
    let steps = steps_for(t, n);
    let out: Vec<Result<Coords>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i);
            let r = w.spec.r();
            let mut y = Coords::from_slice(x.coords());
            for _ in 0..steps {
                let k = draw_xi(&mut rng, r);
                y = w.step(&y, k, w.h())?;
            }
            Ok(y)
        })
        .collect();
    out.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WalkStats {
    pub t: f64,
    pub n: usize,
    pub n_samples: usize,
    pub mean_f: f64,
    pub stderr_f: f64,
    pub ks_distance: Option<f64>,
    /// `(δ, ε, P̂(w(γ, δ) > ε))`.
    pub moc_tail: Option<Vec<(f64, f64, f64)>>,
}

/// Monte Carlo mean and standard error of `f(X_n(t))`.
pub fn estimate_expectation(
    spec: &GeneratorSpec,
    f: &ScalarField,
    x: &Point,
    t: f64,
    n: usize,
    n_samples: usize,
    seed: u64,
) -> Result<WalkStats> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n_samples}")));
    }
    let ends = sample_endpoints(spec, x, t, n, n_samples, seed)?;
    let values: Vec<f64> = ends.iter().map(|y| f.eval(y)).collect();
    let (mean_f, stderr_f) = mean_stderr(&values);
    Ok(WalkStats { t, n, n_samples, mean_f, stderr_f, ks_distance: None, moc_tail: None })
}

/// Kolmogorov–Smirnov statistic `sup |F_N - F|`, using left limits of the
/// reference so that atoms are compared correctly.
pub fn ks_distance_to<F: Fn(f64) -> f64 + ?Sized>(reference_cdf: &F, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut s: Vec<f64> = samples.to_vec();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in sample".into()));
    }
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        let mut j = i;
        while j < s.len() && s[j] == v {
            j += 1;
        }
        let below = i as f64 / n;
        let upto = j as f64 / n;
        let f_at = reference_cdf(v);
        let f_left = reference_cdf(v.next_down());
        d = d.max((upto - f_at).abs()).max((below - f_left).abs());
        i = j;
    }
    Ok(d.min(1.0))
}

/// `sup d(γ(s), γ(t))` over stored times with `|s - t| < δ`.
pub fn modulus_of_continuity(m: &dyn Manifold, path: &PathSample, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    let mut w = 0.0f64;
    for i in 0..path.times.len() {
        let mut j = i + 1;
        while j < path.times.len() && path.times[j] - path.times[i] < delta {
            w = w.max(m.distance_raw(path.points[i].coords(), path.points[j].coords())?);
            j += 1;
        }
    }
    Ok(w)
}

/// Standard normal CDF scaled to variance `var`.
pub fn normal_cdf(var: f64) -> impl Fn(f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let dist = Normal::new(0.0, var.sqrt()).expect("positive variance");
    move |x| dist.cdf(x)
}

/// CDF of the point mass at `a`.
pub fn point_mass_cdf(a: f64) -> impl Fn(f64) -> f64 {
    move |x| if x >= a { 1.0 } else { 0.0 }
}
