use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::quad::{hermite_rule, integrate_adaptive, legendre_rule};
use crate::chernoff::GridFunction;
use crate::error::{Error, Result};
use crate::fields::ScalarField;
use crate::manifold::{Manifold, ManifoldId, Point};

/// Change tolerated when a series truncation is doubled.
pub const SERIES_TOL: f64 = 1e-10;
pub const DEFAULT_L_MAX: usize = 64;
const MAX_WRAP_TERMS: usize = 1 << 16;
const MAX_S1_NODES: usize = 1 << 16;
const MAX_T2_NODES: usize = 1 << 11;
const MAX_GAUSS_POINTS: usize = 20_000_000;

/// Closed-form heat kernels of `½Δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatKernelId {
    GaussRd(usize),
    WrappedGaussS1,
    TorusProduct,
    HyperbolicH2,
    SphereHarmonics(usize),
}

impl HeatKernelId {
    pub fn manifold(&self) -> ManifoldId {
        match *self {
            HeatKernelId::GaussRd(d) => ManifoldId::Euclidean(d),
            HeatKernelId::WrappedGaussS1 => ManifoldId::Circle,
            HeatKernelId::TorusProduct => ManifoldId::Torus2,
            HeatKernelId::HyperbolicH2 => ManifoldId::HyperbolicHalfPlane,
            HeatKernelId::SphereHarmonics(_) => ManifoldId::Sphere2,
        }
    }

    /// The kernel for the Brownian motion of a built-in manifold.
    pub fn for_manifold(m: ManifoldId) -> Self {
        match m {
            ManifoldId::Euclidean(d) => HeatKernelId::GaussRd(d),
            ManifoldId::Circle => HeatKernelId::WrappedGaussS1,
            ManifoldId::Torus2 => HeatKernelId::TorusProduct,
            ManifoldId::HyperbolicHalfPlane => HeatKernelId::HyperbolicH2,
            ManifoldId::Sphere2 => HeatKernelId::SphereHarmonics(DEFAULT_L_MAX),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            HeatKernelId::GaussRd(0) => Err(Error::InvalidArgument("GaussRd needs d >= 1".into())),
            HeatKernelId::SphereHarmonics(l) if l < 8 => {
                Err(Error::InvalidArgument(format!("SphereHarmonics needs l_max >= 8, got {l}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HeatKernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeatKernelId::GaussRd(d) => write!(f, "gauss:{d}"),
            HeatKernelId::WrappedGaussS1 => write!(f, "wrapped-s1"),
            HeatKernelId::TorusProduct => write!(f, "torus2"),
            HeatKernelId::HyperbolicH2 => write!(f, "hyperbolic-h2"),
            HeatKernelId::SphereHarmonics(l) => write!(f, "sphere-harmonics:{l}"),
        }
    }
}

impl FromStr for HeatKernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s.as_str(), None),
        };
        let num = |a: Option<&str>, default: Option<usize>| -> Result<usize> {
            match a {
                Some(a) => a.parse().map_err(|_| Error::Parse(format!("bad kernel argument '{a}'"))),
                None => default.ok_or_else(|| Error::Parse(format!("kernel '{head}' needs an argument"))),
            }
        };
        let k = match head {
            "gauss" | "gauss-rd" => HeatKernelId::GaussRd(num(arg, Some(1))?),
            "wrapped-s1" | "circle" => HeatKernelId::WrappedGaussS1,
            "torus2" | "torus-product" => HeatKernelId::TorusProduct,
            "hyperbolic-h2" | "h2" => HeatKernelId::HyperbolicH2,
            "sphere-harmonics" | "sphere2" => HeatKernelId::SphereHarmonics(num(arg, Some(DEFAULT_L_MAX))?),
            other => return Err(Error::Parse(format!("unknown kernel '{other}'"))),
        };
        k.validate()?;
        Ok(k)
    }
}

/// `(e^{t·½Δ} f)(x)` from the closed-form heat kernel.
pub fn exact_semigroup(kernel: HeatKernelId, f: &ScalarField, t: f64, x: &Point) -> Result<f64> {
    kernel.validate()?;
    kernel.manifold().check_point(x)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("t must be finite and >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(f.eval(x.coords()));
    }
    let f = |y: &[f64]| f.eval(y);
    let x = x.coords();
    match kernel {
        HeatKernelId::GaussRd(d) => gauss_rd(&f, d, t, x),
        HeatKernelId::WrappedGaussS1 => wrapped_s1(&f, t, x[0]),
        HeatKernelId::TorusProduct => torus(&f, t, x),
        HeatKernelId::SphereHarmonics(l) => sphere(&f, l, t, x),
        HeatKernelId::HyperbolicH2 => hyperbolic(&f, t, x),
    }
}

/// [`exact_semigroup`] at every node of a grid.
pub fn exact_semigroup_grid(kernel: HeatKernelId, f: &ScalarField, t: f64, like: &GridFunction) -> Result<GridFunction> {
    let kind = like.kind();
    if kind.manifold_id() != kernel.manifold() {
        return Err(Error::InvalidArgument(format!("kernel {kernel} does not match grid on {}", kind.manifold_id())));
    }
    let values: Vec<f64> = (0..kind.len())
        .into_par_iter()
        .map(|i| exact_semigroup(kernel, f, t, &Point::from_coords(like.node(i))))
        .collect::<Result<_>>()?;
    like.with_values(values)
}

fn gauss_rd(f: &(dyn Fn(&[f64]) -> f64 + Sync), d: usize, t: f64, x: &[f64]) -> Result<f64> {
    let m = match d {
        1 => 64,
        2 => 40,
        3 => 20,
        4 => 12,
        _ => 8,
    };
    let total = (m as f64).powi(d as i32);
    if total > MAX_GAUSS_POINTS as f64 {
        return Err(Error::TruncationBudgetExceeded(format!("{m}^{d} Gauss–Hermite points")));
    }
    let rule = hermite_rule(m);
    let scale = (2.0 * t).sqrt();
    let norm = PI.powf(-(d as f64) / 2.0);
    let mut idx = vec![0usize; d];
    let mut y = vec![0.0; d];
    let mut terms = Vec::with_capacity(total as usize);
    loop {
        let mut w = norm;
        for k in 0..d {
            let (u, wk) = rule[idx[k]];
            y[k] = x[k] + scale * u;
            w *= wk;
        }
        terms.push(w * f(&y));
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    Ok(crate::rng::compensated_sum(terms))
}

/// Wrapped Gaussian density of `½Δ` on the circle, summing `|k| ≤ terms`.
fn wrapped_density(diff: f64, t: f64, terms: usize) -> f64 {
    let d = crate::manifold::wrap_angle(diff + PI) - PI;
    let mut s = 0.0;
    for k in -(terms as i64)..=(terms as i64) {
        let z = d + TAU * k as f64;
        s += (-z * z / (2.0 * t)).exp();
    }
    s / (TAU * t).sqrt()
}

fn wrap_terms(t: f64) -> usize {
    (6.0 / t.sqrt()).ceil() as usize + 3
}

/// Picks the wrap count: starts from `⌈6/√t⌉+3` and doubles until doubling
/// moves the density by less than [`SERIES_TOL`] at its widest point.
fn settled_wrap_terms(t: f64) -> Result<usize> {
    let mut k = wrap_terms(t);
    loop {
        let a = wrapped_density(PI, t, k);
        let b = wrapped_density(PI, t, 2 * k);
        if (a - b).abs() < SERIES_TOL * 1e-2 {
            return Ok(k);
        }
        k *= 2;
        if k > MAX_WRAP_TERMS {
            return Err(Error::TruncationBudgetExceeded(format!("wrapped Gaussian at t = {t}")));
        }
    }
}

fn start_nodes(t: f64) -> usize {
    let want = (16.0 * TAU / t.sqrt()).ceil() as usize;
    want.clamp(64, 1 << 12).next_power_of_two()
}

fn wrapped_s1(f: &(dyn Fn(&[f64]) -> f64 + Sync), t: f64, x: f64) -> Result<f64> {
    let k = settled_wrap_terms(t)?;
    let quad = |n: usize| -> f64 {
        let h = TAU / n as f64;
        crate::rng::compensated_sum((0..n).map(|q| {
            let y = q as f64 * h;
            h * wrapped_density(x - y, t, k) * f(&[y])
        }))
    };
    let mut n = start_nodes(t);
    let mut prev = quad(n);
    loop {
        n *= 2;
        let cur = quad(n);
        if (cur - prev).abs() <= 1e-13 * (1.0 + cur.abs()) {
            return Ok(cur);
        }
        if n >= MAX_S1_NODES {
            return Err(Error::TruncationBudgetExceeded(format!("circle quadrature at t = {t}")));
        }
        prev = cur;
    }
}

fn torus(f: &(dyn Fn(&[f64]) -> f64 + Sync), t: f64, x: &[f64]) -> Result<f64> {
    let k = settled_wrap_terms(t)?;
    let quad = |n: usize| -> f64 {
        let h = TAU / n as f64;
        let w1: Vec<f64> = (0..n).map(|q| h * wrapped_density(x[0] - q as f64 * h, t, k)).collect();
        let w2: Vec<f64> = (0..n).map(|q| h * wrapped_density(x[1] - q as f64 * h, t, k)).collect();
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = i as f64 * h;
                w1[i] * crate::rng::compensated_sum((0..n).map(|j| w2[j] * f(&[a, j as f64 * h])))
            })
            .collect();
        crate::rng::compensated_sum(rows)
    };
    let mut n = start_nodes(t).min(256);
    let mut prev = quad(n);
    loop {
        n *= 2;
        let cur = quad(n);
        if (cur - prev).abs() <= 1e-12 * (1.0 + cur.abs()) {
            return Ok(cur);
        }
        if n >= MAX_T2_NODES {
            return Err(Error::TruncationBudgetExceeded(format!("torus quadrature at t = {t}")));
        }
        prev = cur;
    }
}

/// Zonal (Funk–Hecke) form of the spherical-harmonic series,
/// `Σ_l e^{-l(l+1)t/2} (2l+1)/(4π) ∫ P_l(x·y) f(y) dA(y)`, computed to `l_max`
/// and to `2·l_max`; the two must agree within [`SERIES_TOL`].
fn sphere(f: &(dyn Fn(&[f64]) -> f64 + Sync), l_max: usize, t: f64, x: &[f64]) -> Result<f64> {
    let l_top = 2 * l_max;
    let nq = l_top + 16;
    let nphi = 2 * nq;
    let rule = legendre_rule(nq);
    let coeffs: Vec<Vec<f64>> = rule
        .par_iter()
        .map(|&(z, wz)| {
            let s = (1.0 - z * z).max(0.0).sqrt();
            let mut c = vec![0.0; l_top + 1];
            let mut p = vec![0.0; l_top + 1];
            for j in 0..nphi {
                let ph = TAU * j as f64 / nphi as f64;
                let y = [s * ph.cos(), s * ph.sin(), z];
                let w = wz * TAU / nphi as f64 * f(&y);
                let mu = (x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).clamp(-1.0, 1.0);
                legendre_all(mu, &mut p);
                for l in 0..=l_top {
                    c[l] += w * p[l];
                }
            }
            c
        })
        .collect();
    let mut c = vec![0.0; l_top + 1];
    for row in &coeffs {
        for l in 0..=l_top {
            c[l] += row[l];
        }
    }
    let term = |l: usize| (2 * l + 1) as f64 / (4.0 * PI) * (-((l * (l + 1)) as f64) * t / 2.0).exp() * c[l];
    let low = crate::rng::compensated_sum((0..=l_max).map(term));
    let high = low + crate::rng::compensated_sum((l_max + 1..=l_top).map(term));
    if (high - low).abs() >= SERIES_TOL {
        return Err(Error::TruncationBudgetExceeded(format!(
            "spherical harmonics: doubling l_max = {l_max} moved the value by {:.3e}",
            (high - low).abs()
        )));
    }
    Ok(low)
}

fn legendre_all(mu: f64, p: &mut [f64]) {
    p[0] = 1.0;
    if p.len() > 1 {
        p[1] = mu;
    }
    for l in 2..p.len() {
        p[l] = ((2 * l - 1) as f64 * mu * p[l - 1] - (l - 1) as f64 * p[l - 2]) / l as f64;
    }
}

/// Heat kernel of `Δ` on the hyperbolic plane at time `s` and distance `ρ`:
/// `√2 e^{-s/4} (4πs)^{-3/2} ∫_ρ^∞ r e^{-r²/4s} (cosh r - cosh ρ)^{-1/2} dr`.
pub fn hyperbolic_kernel(s: f64, rho: f64) -> Result<f64> {
    // r = ρ + v² removes the endpoint singularity; e^{-ρ²/4s} is factored out
    let g = |v: f64| -> f64 {
        let v2 = v * v;
        let r = rho + v2;
        let den = (2.0 * (rho + 0.5 * v2).sinh() * (0.5 * v2).sinh()).sqrt();
        let lead = if v == 0.0 {
            if rho == 0.0 {
                return 0.0;
            }
            2.0 / rho.sinh().sqrt()
        } else {
            2.0 * v / den
        };
        lead * r * (-(2.0 * rho * v2 + v2 * v2) / (4.0 * s)).exp()
    };
    let v_max = (240.0 * s).powf(0.25).max(1.0);
    let mut acc = 0.0;
    let pieces = 8;
    for i in 0..pieces {
        let a = v_max * i as f64 / pieces as f64;
        let b = v_max * (i + 1) as f64 / pieces as f64;
        acc += integrate_adaptive(&g, a, b, 1e-14)?;
    }
    Ok(2f64.sqrt() * (-s / 4.0).exp() * (4.0 * PI * s).powf(-1.5) * (-rho * rho / (4.0 * s)).exp() * acc)
}

fn hyperbolic(f: &(dyn Fn(&[f64]) -> f64 + Sync), t: f64, x: &[f64]) -> Result<f64> {
    let m = ManifoldId::HyperbolicHalfPlane;
    let s = t / 2.0;
    let y0 = x[1];
    // room for integrands growing like e^{2ρ}
    let rho_max = 2.0 * s * 2.5 + (16.0 * s * s * 2.5 * 2.5 / 4.0 + 240.0 * s).sqrt();
    let circle_mean = |rho: f64| -> Result<f64> {
        let at = |n: usize| -> Result<f64> {
            let mut acc = 0.0;
            for j in 0..n {
                let ph = TAU * (j as f64 + 0.5) / n as f64;
                let v = [rho * y0 * ph.cos(), rho * y0 * ph.sin()];
                acc += f(&m.geodesic_raw(x, &v, 1.0)?);
            }
            Ok(acc / n as f64)
        };
        let mut n = 32;
        let mut prev = at(n)?;
        loop {
            n *= 2;
            let cur = at(n)?;
            if (cur - prev).abs() <= 1e-13 * (1.0 + cur.abs()) || n >= 8192 {
                return Ok(cur);
            }
            prev = cur;
        }
    };
    let err = std::cell::RefCell::new(None);
    let g = |rho: f64| -> f64 {
        let r = hyperbolic_kernel(s, rho).and_then(|k| Ok(TAU * k * rho.sinh() * circle_mean(rho)?));
        match r {
            Ok(v) => v,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let pieces = 16;
    let mut acc = 0.0;
    for i in 0..pieces {
        let a = rho_max * i as f64 / pieces as f64;
        let b = rho_max * (i + 1) as f64 / pieces as f64;
        acc += integrate_adaptive(&g, a, b, 1e-12)?;
    }
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn wrapped_cos_decays() {
        for &t in &[0.05, 0.5, 1.0, 3.0] {
            for &x in &[0.0, 1.0, 2.5] {
                let v = exact_semigroup(HeatKernelId::WrappedGaussS1, &ScalarField::cos_of(0), t, &Point::new([x])).unwrap();
                close(v, (-t / 2.0).exp() * x.cos(), 1e-11);
            }
        }
    }

    #[test]
    fn gaussian_second_moment() {
        let f = ScalarField::from_fn("x^2", |x| x[0] * x[0]);
        for &(x, t) in &[(0.0, 1.0), (1.5, 0.3), (-2.0, 2.0)] {
            let v = exact_semigroup(HeatKernelId::GaussRd(1), &f, t, &Point::new([x])).unwrap();
            close(v, x * x + t, 1e-11);
        }
    }

    #[test]
    fn sphere_first_harmonic() {
        let f = ScalarField::coordinate(2);
        let x = Point::new([0.48, 0.6, 0.64]);
        let v = exact_semigroup(HeatKernelId::SphereHarmonics(64), &f, 1.0, &x).unwrap();
        close(v, (-1.0f64).exp() * 0.64, 1e-11);
    }

    #[test]
    fn torus_product_of_cosines() {
        let f = ScalarField::from_fn("cos x cos 2y", |x| x[0].cos() * (2.0 * x[1]).cos());
        let v = exact_semigroup(HeatKernelId::TorusProduct, &f, 0.4, &Point::new([0.3, 1.1])).unwrap();
        close(v, (-0.2f64 - 0.8).exp() * 0.3f64.cos() * 2.2f64.cos(), 1e-11);
    }

    #[test]
    fn hyperbolic_mass_and_eigenfunctions() {
        let x = Point::new([0.3, 1.7]);
        let one = exact_semigroup(HeatKernelId::HyperbolicH2, &ScalarField::constant(1.0), 0.5, &x).unwrap();
        close(one, 1.0, 1e-9);
        // Δ y^2 = 2 y^2, so e^{t½Δ} y^2 = e^{t} y^2
        let y2 = ScalarField::from_fn("y^2", |p| p[1] * p[1]);
        let v = exact_semigroup(HeatKernelId::HyperbolicH2, &y2, 0.5, &x).unwrap();
        close(v, 0.5f64.exp() * 1.7 * 1.7, 1e-8);
    }

    #[test]
    fn parses_kernel_tags() {
        assert_eq!("gauss:2".parse::<HeatKernelId>().unwrap(), HeatKernelId::GaussRd(2));
        assert_eq!("sphere-harmonics".parse::<HeatKernelId>().unwrap(), HeatKernelId::SphereHarmonics(64));
        assert!("sphere-harmonics:4".parse::<HeatKernelId>().is_err());
        for k in [HeatKernelId::HyperbolicH2, HeatKernelId::TorusProduct, HeatKernelId::WrappedGaussS1] {
            assert_eq!(k.to_string().parse::<HeatKernelId>().unwrap(), k);
        }
    }
}
