//! Crank–Nicolson solver for `∂_t u = L u` on periodic grids.
//!
//! The operator is split as `L u = ½ ∂_i(a^{ij} ∂_j u) + β^i ∂_i u + c u`
//! with `a = Σ_k A_k A_kᵀ` and `β = A_0 - ½ Σ_k (∇·A_k) A_k`. The divergence
//! part is discretized conservatively (half-node coefficients on the
//! diagonal, nested central differences off it), so the discrete operator
//! has zero column sums whenever `β` and `c` vanish. For the derived
//! `½Σ(∇·A_k)A_k` drift that makes grid mass a conserved quantity.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::chernoff::{GridFunction, GridKind};
use crate::error::{Error, Result};
use crate::fields::{covariant_divergence_raw, GeneratorSpec};
use crate::manifold::Manifold;

/// Largest time step accepted.
pub const MAX_DT: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdSolverSettings {
    /// Time steps over `[0, t]`; each must be at most [`MAX_DT`].
    pub steps: usize,
    /// Relative residual at which each implicit solve stops.
    pub solver_tol: f64,
    pub max_iter: usize,
}

impl Default for FdSolverSettings {
    fn default() -> Self {
        FdSolverSettings { steps: 200, solver_tol: 1e-14, max_iter: 2000 }
    }
}

impl FdSolverSettings {
    pub fn with_steps(steps: usize) -> Self {
        FdSolverSettings { steps, ..Default::default() }
    }

    /// Fewest steps that respect [`MAX_DT`] at horizon `t`.
    pub fn min_steps(t: f64) -> usize {
        ((t / MAX_DT) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Sparse rows: `(column, value)` pairs.
struct Sparse {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|&(j, v)| v * x[j]).sum();
        }
    }

    fn add(row: &mut Vec<(usize, f64)>, j: usize, v: f64) {
        match row.iter_mut().find(|e| e.0 == j) {
            Some(e) => e.1 += v,
            None => row.push((j, v)),
        }
    }
}

struct Axes {
    n: Vec<usize>,
    h: Vec<f64>,
}

impl Axes {
    fn of(kind: GridKind) -> Result<Self> {
        let n = match kind {
            GridKind::Circle { n } => vec![n],
            GridKind::Torus2 { n1, n2 } => vec![n1, n2],
            GridKind::Sphere2 { .. } => return Err(Error::Unsupported("fd_solve runs on Circle and Torus2 grids".into())),
        };
        let h = n.iter().map(|&k| TAU / k as f64).collect();
        Ok(Axes { n, h })
    }

    fn multi(&self, i: usize) -> Vec<usize> {
        match self.n.len() {
            1 => vec![i],
            _ => vec![i / self.n[1], i % self.n[1]],
        }
    }

    fn flat(&self, m: &[usize]) -> usize {
        match self.n.len() {
            1 => m[0],
            _ => m[0] * self.n[1] + m[1],
        }
    }

    fn shift(&self, i: usize, axis: usize, by: i64) -> usize {
        let mut m = self.multi(i);
        let n = self.n[axis] as i64;
        m[axis] = (m[axis] as i64 + by).rem_euclid(n) as usize;
        self.flat(&m)
    }

    fn coords(&self, i: usize) -> Vec<f64> {
        self.multi(i).iter().zip(&self.h).map(|(&k, &h)| k as f64 * h).collect()
    }
}

fn diffusion(spec: &GeneratorSpec, x: &[f64]) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut a = vec![vec![0.0; d]; d];
    for f in spec.fields() {
        let v = f.eval_raw(x);
        for i in 0..d {
            for j in 0..d {
                a[i][j] += v[i] * v[j];
            }
        }
    }
    a
}

fn transport(spec: &GeneratorSpec, x: &[f64]) -> Vec<f64> {
    let mut b: Vec<f64> = spec.drift().eval_raw(x).to_vec();
    for f in spec.fields() {
        let div = covariant_divergence_raw(f, x);
        let v = f.eval_raw(x);
        for i in 0..b.len() {
            b[i] -= 0.5 * div * v[i];
        }
    }
    b
}

/// Assembles the discrete generator.
fn assemble(spec: &GeneratorSpec, ax: &Axes) -> Sparse {
    let d = ax.n.len();
    let len: usize = ax.n.iter().product();
    let nodes: Vec<Vec<f64>> = (0..len).map(|i| ax.coords(i)).collect();
    let a_node: Vec<Vec<Vec<f64>>> = nodes.iter().map(|x| diffusion(spec, x)).collect();
    let mut rows = vec![Vec::with_capacity(1 + 4 * d + 4 * d * d); len];
    for i in 0..len {
        let x = &nodes[i];
        let row = &mut rows[i];
        for k in 0..d {
            let h = ax.h[k];
            let mut xp = x.clone();
            xp[k] += 0.5 * h;
            let mut xm = x.clone();
            xm[k] -= 0.5 * h;
            let ap = diffusion(spec, &xp)[k][k];
            let am = diffusion(spec, &xm)[k][k];
            let (ip, im) = (ax.shift(i, k, 1), ax.shift(i, k, -1));
            Sparse::add(row, ip, 0.5 * ap / (h * h));
            Sparse::add(row, im, 0.5 * am / (h * h));
            Sparse::add(row, i, -0.5 * (ap + am) / (h * h));
        }
        // ½ D_k(a^{kl} D_l u) for k ≠ l
        for k in 0..d {
            for l in 0..d {
                if k == l {
                    continue;
                }
                let c = 0.5 / (4.0 * ax.h[k] * ax.h[l]);
                for (sk, sign_k) in [(1i64, 1.0), (-1, -1.0)] {
                    let j = ax.shift(i, k, sk);
                    let akl = a_node[j][k][l];
                    Sparse::add(row, ax.shift(j, l, 1), sign_k * c * akl);
                    Sparse::add(row, ax.shift(j, l, -1), -sign_k * c * akl);
                }
            }
        }
        let b = transport(spec, x);
        for k in 0..d {
            let h = ax.h[k];
            Sparse::add(row, ax.shift(i, k, 1), b[k] / (2.0 * h));
            Sparse::add(row, ax.shift(i, k, -1), -b[k] / (2.0 * h));
        }
        if let Some(c) = spec.potential() {
            Sparse::add(row, i, c.eval(x));
        }
        row.retain(|e| e.1 != 0.0);
    }
    Sparse { rows }
}

/// BiCGSTAB on `(I - θL) x = rhs`, warm-started at `x`.
fn solve(l: &Sparse, theta: f64, rhs: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<()> {
    let n = rhs.len();
    let apply = |v: &[f64], out: &mut [f64]| {
        l.mul(v, out);
        for i in 0..n {
            out[i] = v[i] - theta * out[i];
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let norm_b = dot(rhs, rhs).sqrt();
    if norm_b == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for _ in 0..max_iter {
        if dot(&r, &r).sqrt() <= tol * norm_b {
            return Ok(());
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(Error::SingularLinearSystem("BiCGSTAB breakdown".into()));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        apply(&p, &mut v);
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return Err(Error::SingularLinearSystem("BiCGSTAB breakdown".into()));
        }
        alpha = rho / r0v;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if dot(&s, &s).sqrt() <= tol * norm_b {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            return Ok(());
        }
        apply(&s, &mut t);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    let res = dot(&r, &r).sqrt() / norm_b;
    if res <= 1e3 * tol {
        return Ok(());
    }
    Err(Error::SingularLinearSystem(format!("no convergence after {max_iter} iterations (residual {res:.3e})")))
}

/// Crank–Nicolson solution at time `t` of `∂_t u = L u`, `u(0) = f0`.
pub fn fd_solve(spec: &GeneratorSpec, f0: &GridFunction, t: f64, settings: &FdSolverSettings) -> Result<GridFunction> {
    let kind = f0.kind();
    if spec.manifold().label() != Manifold::label(&kind.manifold_id()) {
        return Err(Error::InvalidArgument(format!(
            "generator lives on {}, grid on {}",
            spec.manifold().label(),
            kind.manifold_id()
        )));
    }
    let ax = Axes::of(kind)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("t must be finite and >= 0, got {t}")));
    }
    if settings.steps == 0 {
        return Err(Error::InvalidArgument("need at least one time step".into()));
    }
    let dt = t / settings.steps as f64;
    if dt > MAX_DT * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "time step {dt} exceeds {MAX_DT}; use at least {} steps",
            FdSolverSettings::min_steps(t)
        )));
    }
    if t == 0.0 {
        return Ok(f0.clone());
    }
    let l = assemble(spec, &ax);
    let n = f0.values().len();
    let mut u = f0.values().to_vec();
    let mut lu = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for _ in 0..settings.steps {
        l.mul(&u, &mut lu);
        for i in 0..n {
            rhs[i] = u[i] + 0.5 * dt * lu[i];
        }
        solve(&l, 0.5 * dt, &rhs, &mut u, settings.solver_tol, settings.max_iter)?;
    }
    f0.with_values(u)
}

/// Trapezoid integral of a grid function against the volume measure.
pub fn grid_mass(f: &GridFunction) -> Result<f64> {
    let ax = Axes::of(f.kind())?;
    let cell: f64 = ax.h.iter().product();
    Ok(cell * crate::rng::compensated_sum(f.values().iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chernoff::Interp;
    use crate::fields::{DriftPolicy, ScalarField, VectorField};
    use crate::manifold::ManifoldId;
    use std::sync::Arc;

    fn circle_heat() -> GeneratorSpec {
        let m: Arc<dyn Manifold> = Arc::new(ManifoldId::Circle);
        GeneratorSpec::new(
            m.clone(),
            vec![VectorField::constant(m.clone(), &[1.0]).unwrap()],
            DriftPolicy::Explicit(VectorField::zero(m)),
            None,
            true,
        )
        .unwrap()
    }

    #[test]
    fn constants_are_stationary() {
        let f0 = GridFunction::from_fn(GridKind::Circle { n: 64 }, Interp::Linear, |_| 2.5).unwrap();
        let u = fd_solve(&circle_heat(), &f0, 1.0, &FdSolverSettings::with_steps(100)).unwrap();
        assert!(u.values().iter().all(|v| (v - 2.5).abs() < 1e-10));
    }

    #[test]
    fn circle_heat_cosine() {
        let kind = GridKind::Circle { n: 512 };
        let f0 = GridFunction::sample(kind, Interp::Linear, &ScalarField::cos_of(0)).unwrap();
        let u = fd_solve(&circle_heat(), &f0, 1.0, &FdSolverSettings::with_steps(200)).unwrap();
        let want = GridFunction::from_fn(kind, Interp::Linear, |x| (-0.5f64).exp() * x[0].cos()).unwrap();
        assert!(u.sup_distance(&want).unwrap() < 2e-4);
    }

    #[test]
    fn rejects_large_steps_and_sphere() {
        let f0 = GridFunction::from_fn(GridKind::Circle { n: 64 }, Interp::Linear, |_| 1.0).unwrap();
        assert!(fd_solve(&circle_heat(), &f0, 1.0, &FdSolverSettings::with_steps(50)).is_err());
        assert_eq!(FdSolverSettings::min_steps(1.0), 100);
    }
}
