use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use smallvec::SmallVec;

use super::{ChernoffOp, ChernoffPlan};
use crate::error::{Error, Result};
use crate::fields::{GeneratorSpec, ScalarField};
use crate::manifold::{wrap_angle, Coords, Manifold, ManifoldId};

/// Uniform node sets on the compact built-ins.
///
/// Circle and torus nodes sit at `2π i / n`. Sphere nodes sit at colatitude
/// `(i + ½) π / nlat` and longitude `2π j / nlon`; the poles are not nodes
/// and carry the mean of the nearest ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Circle { n: usize },
    Torus2 { n1: usize, n2: usize },
    Sphere2 { nlat: usize, nlon: usize },
}

impl GridKind {
    pub fn manifold_id(&self) -> ManifoldId {
        match self {
            GridKind::Circle { .. } => ManifoldId::Circle,
            GridKind::Torus2 { .. } => ManifoldId::Torus2,
            GridKind::Sphere2 { .. } => ManifoldId::Sphere2,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            GridKind::Circle { n } => n,
            GridKind::Torus2 { n1, n2 } => n1 * n2,
            GridKind::Sphere2 { nlat, nlon } => nlat * nlon,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let axes: Vec<usize> = match *self {
            GridKind::Circle { n } => vec![n],
            GridKind::Torus2 { n1, n2 } => vec![n1, n2],
            GridKind::Sphere2 { nlat, nlon } => vec![nlat, nlon],
        };
        if axes.iter().any(|&a| a < 8) {
            return Err(Error::InvalidArgument(format!("grid needs at least 8 nodes per axis, got {axes:?}")));
        }
        Ok(())
    }

    pub fn node(&self, i: usize) -> Coords {
        match *self {
            GridKind::Circle { n } => Coords::from_slice(&[TAU * i as f64 / n as f64]),
            GridKind::Torus2 { n1, n2 } => {
                Coords::from_slice(&[TAU * (i / n2) as f64 / n1 as f64, TAU * (i % n2) as f64 / n2 as f64])
            }
            GridKind::Sphere2 { nlat, nlon } => {
                let th = (((i / nlon) as f64) + 0.5) * PI / nlat as f64;
                let ph = TAU * (i % nlon) as f64 / nlon as f64;
                Coords::from_slice(&[th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()])
            }
        }
    }

    /// Smallest node spacing (geodesic length).
    pub fn cell(&self) -> f64 {
        match *self {
            GridKind::Circle { n } => TAU / n as f64,
            GridKind::Torus2 { n1, n2 } => TAU / n1.max(n2) as f64,
            GridKind::Sphere2 { nlat, nlon } => (PI / nlat as f64).min(TAU / nlon as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    CubicPeriodic,
}

type Stencil = SmallVec<[(usize, f64); 16]>;

/// Node values on a compact manifold with an interpolation rule.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    kind: GridKind,
    interp: Interp,
    values: Vec<f64>,
}

fn linear_weights(s: f64) -> [f64; 2] {
    [1.0 - s, s]
}

/// Weights of nodes `i-1, i, i+1, i+2` for the point `i + s`.
fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

/// Periodic 1-D stencil: (node index, weight) for coordinate `v` in units of cells.
fn axis_stencil(v: f64, n: usize, interp: Interp) -> SmallVec<[(usize, f64); 4]> {
    let mut fl = v.floor();
    let mut s = v - fl;
    // snap points sitting on a node so the stencil is exact there
    if s < 1e-12 {
        s = 0.0;
    } else if s > 1.0 - 1e-12 {
        s = 0.0;
        fl += 1.0;
    }
    let i = (fl as i64).rem_euclid(n as i64) as usize;
    let mut out = SmallVec::new();
    if s == 0.0 {
        out.push((i, 1.0));
        return out;
    }
    match interp {
        Interp::Linear => {
            let w = linear_weights(s);
            out.push((i, w[0]));
            out.push(((i + 1) % n, w[1]));
        }
        Interp::CubicPeriodic => {
            let w = cubic_weights(s);
            for (k, wk) in w.iter().enumerate() {
                out.push(((i + n + k - 1) % n, *wk));
            }
        }
    }
    out
}

impl GridFunction {
    pub fn new(kind: GridKind, interp: Interp, values: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        if values.len() != kind.len() {
            return Err(Error::InvalidArgument(format!("grid has {} nodes, got {} values", kind.len(), values.len())));
        }
        Ok(GridFunction { kind, interp, values })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64 + Sync>(kind: GridKind, interp: Interp, f: F) -> Result<Self> {
        kind.validate()?;
        let values = (0..kind.len()).map(|i| f(&kind.node(i))).collect();
        Ok(GridFunction { kind, interp, values })
    }

    pub fn sample(kind: GridKind, interp: Interp, f: &ScalarField) -> Result<Self> {
        Self::from_fn(kind, interp, |x| f.eval(x))
    }

    /// Default interpolation: cubic on circle and torus, bilinear on the sphere.
    pub fn default_interp(kind: GridKind) -> Interp {
        match kind {
            GridKind::Sphere2 { .. } => Interp::Linear,
            _ => Interp::CubicPeriodic,
        }
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn interp(&self) -> Interp {
        self.interp
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node(&self, i: usize) -> Coords {
        self.kind.node(i)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, self.interp, values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max_i |self_i - other_i|`.
    pub fn sup_distance(&self, other: &GridFunction) -> Result<f64> {
        if self.kind != other.kind {
            return Err(Error::InvalidArgument("grids differ".into()));
        }
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Interpolation weights at the point `p`; they sum to one.
    pub fn stencil(&self, p: &[f64]) -> Stencil {
        let mut out = Stencil::new();
        match self.kind {
            GridKind::Circle { n } => {
                let v = wrap_angle(p[0]) * n as f64 / TAU;
                out.extend(axis_stencil(v, n, self.interp));
            }
            GridKind::Torus2 { n1, n2 } => {
                let a = axis_stencil(wrap_angle(p[0]) * n1 as f64 / TAU, n1, self.interp);
                let b = axis_stencil(wrap_angle(p[1]) * n2 as f64 / TAU, n2, self.interp);
                for (i, wi) in &a {
                    for (j, wj) in &b {
                        out.push((i * n2 + j, wi * wj));
                    }
                }
            }
            GridKind::Sphere2 { nlat, nlon } => self.sphere_stencil(p, nlat, nlon, &mut out),
        }
        out
    }

    fn sphere_stencil(&self, p: &[f64], nlat: usize, nlon: usize, out: &mut Stencil) {
        let th = p[2].clamp(-1.0, 1.0).acos();
        let ph = wrap_angle(p[1].atan2(p[0]));
        let lon = axis_stencil(ph * nlon as f64 / TAU, nlon, Interp::Linear);
        let dth = PI / nlat as f64;
        let u = th / dth - 0.5;
        let ring = |i: usize, w: f64, out: &mut Stencil| {
            for (j, wj) in &lon {
                out.push((i * nlon + j, w * wj));
            }
        };
        let pole = |i: usize, w: f64, out: &mut Stencil| {
            let share = w / nlon as f64;
            for j in 0..nlon {
                out.push((i * nlon + j, share));
            }
        };
        if u < 0.0 {
            // between the north pole (u = -1/2) and ring 0
            let w_ring = 2.0 * (u + 0.5);
            ring(0, w_ring, out);
            pole(0, 1.0 - w_ring, out);
        } else if u >= (nlat - 1) as f64 {
            let w_ring = 1.0 - 2.0 * (u - (nlat - 1) as f64);
            ring(nlat - 1, w_ring, out);
            pole(nlat - 1, 1.0 - w_ring, out);
        } else {
            let i0 = u.floor() as usize;
            let s = u - i0 as f64;
            ring(i0, 1.0 - s, out);
            if s > 0.0 {
                ring(i0 + 1, s, out);
            }
        }
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        self.stencil(p).iter().map(|(i, w)| w * self.values[*i]).sum()
    }
}

/// Result of a grid iteration with its resolution diagnostic.
#[derive(Clone, Debug)]
pub struct GridRun {
    pub function: GridFunction,
    /// Set when linear interpolation is used and some branch moves less than
    /// one grid cell, so interpolation may smear more than the scheme moves.
    pub under_resolved: bool,
    pub min_displacement: f64,
}

/// `S(t/n)^n f0` on the grid.
pub fn iterate_grid(spec: &GeneratorSpec, plan: &ChernoffPlan, t: f64, n: usize, f0: &GridFunction) -> Result<GridFunction> {
    iterate_grid_checked(spec, plan, t, n, f0).map(|r| r.function)
}

/// Semi-Lagrangian sweeps: branch points and interpolation stencils are
/// computed once per node, giving a fixed sparse operator applied `n` times.
pub fn iterate_grid_checked(
    spec: &GeneratorSpec,
    plan: &ChernoffPlan,
    t: f64,
    n: usize,
    f0: &GridFunction,
) -> Result<GridRun> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let m = spec.manifold();
    if m.builtin() != Some(f0.kind.manifold_id()) {
        return Err(Error::VariantIncompatible(format!(
            "grid on {} does not match generator manifold {}",
            f0.kind.manifold_id(),
            m.label()
        )));
    }
    if t == 0.0 {
        return Ok(GridRun { function: f0.clone(), under_resolved: false, min_displacement: 0.0 });
    }
    let op = ChernoffOp::new(spec, plan, t / n as f64)?;
    let rows: Vec<Result<(Vec<(usize, f64)>, f64)>> = (0..f0.kind.len())
        .into_par_iter()
        .map(|i| operator_row(&op, m.as_ref(), f0, i))
        .collect();
    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    row_ptr.push(0usize);
    let mut entries: Vec<(usize, f64)> = Vec::new();
    let mut min_disp = f64::INFINITY;
    for r in rows {
        let (row, disp) = r?;
        entries.extend(row);
        row_ptr.push(entries.len());
        min_disp = min_disp.min(disp);
    }
    let mut cur = f0.values.clone();
    for _ in 0..n {
        cur = (0..row_ptr.len() - 1)
            .into_par_iter()
            .map(|i| entries[row_ptr[i]..row_ptr[i + 1]].iter().map(|(j, w)| w * cur[*j]).sum())
            .collect();
    }
    let under_resolved = f0.interp == Interp::Linear && min_disp < f0.kind.cell();
    Ok(GridRun { function: f0.with_values(cur)?, under_resolved, min_displacement: min_disp })
}

fn operator_row(op: &ChernoffOp, m: &dyn Manifold, f0: &GridFunction, i: usize) -> Result<(Vec<(usize, f64)>, f64)> {
    let x = f0.kind.node(i);
    let mut row = Vec::new();
    let mut disp = f64::INFINITY;
    for b in 0..op.branch_count() {
        let p = op.branch_point(&x, b)?;
        if !op.is_stay(b) {
            disp = disp.min(m.distance_raw(&x, &p)?);
        }
        let w = op.weights()[b];
        row.extend(f0.stencil(&p).into_iter().map(|(j, wj)| (j, w * wj)));
    }
    if op.has_potential() {
        row.push((i, op.potential_term(&x)));
    }
    Ok((row, disp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_sum_to_one_and_reproduce_nodes() {
        let kinds = [
            GridKind::Circle { n: 16 },
            GridKind::Torus2 { n1: 8, n2: 12 },
            GridKind::Sphere2 { nlat: 8, nlon: 16 },
        ];
        for kind in kinds {
            for interp in [Interp::Linear, Interp::CubicPeriodic] {
                let g = GridFunction::from_fn(kind, interp, |x| x[0] + 2.0).unwrap();
                for i in 0..kind.len() {
                    let x = kind.node(i);
                    assert!((g.eval(&x) - g.values()[i]).abs() < 1e-12);
                }
                let probe = match kind {
                    GridKind::Circle { .. } => vec![1.234],
                    GridKind::Torus2 { .. } => vec![6.2, 0.01],
                    GridKind::Sphere2 { .. } => vec![0.0, 0.0, 1.0],
                };
                let s: f64 = g.stencil(&probe).iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cubic_is_exact_on_cubics_locally() {
        let w = cubic_weights(0.3);
        let f = |x: f64| x * x * x - 2.0 * x;
        let v: f64 = (0..4).map(|k| w[k] * f(k as f64 - 1.0)).sum();
        assert!((v - f(0.3)).abs() < 1e-14);
    }

    #[test]
    fn coarse_grids_rejected() {
        assert!(GridFunction::from_fn(GridKind::Circle { n: 4 }, Interp::Linear, |_| 0.0).is_err());
    }
}
