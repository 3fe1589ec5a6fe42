//! Chernoff functions `S(t)` and their compositions `S(t/n)^n`.
//!
//! | variant | branches | weights | shift |
//! |---------|----------|---------|-------|
//! | `General` | `±A_j`, `A_0` | `1/(4r)`, `1/2` | flow for `√(2rt)`, `2t`; plus `t c(x) f(x)` |
//! | `DriftlessCorrected` | `±A_j` | `1/(2r)` | flow for `√(rt)` |
//! | `DriftlessLiteral` | `±A_j` | `1/(2r)` | flow for `√(2rt)` |
//! | `HeatGeodesic` | `±e_k` | `1/(2d)` | geodesic with velocity `±√d e_k` for time `√t` |
//!
//! `DriftlessLiteral` expands to `f + 2t L_0 f + o(t)`, so it is not
//! consistent with `L_0`; it is kept to expose that. `DriftlessCorrected`
//! halves the squared step and is consistent.

mod grid;
mod mc;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

pub use grid::{iterate_grid, iterate_grid_checked, GridFunction, GridKind, GridRun, Interp};
pub use mc::{iterate_mc, McEstimate};

use crate::error::{Error, Result};
use crate::fields::{apply_generator_raw, default_sample, GeneratorSpec, ScalarField, VectorField};
use crate::flows::flow_raw;
use crate::manifold::{Coords, Manifold, Point};
use crate::ode::OdeSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChernoffVariant {
    General,
    DriftlessCorrected,
    DriftlessLiteral,
    HeatGeodesic,
}

impl fmt::Display for ChernoffVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChernoffVariant::General => "general",
            ChernoffVariant::DriftlessCorrected => "driftless-corrected",
            ChernoffVariant::DriftlessLiteral => "driftless-literal",
            ChernoffVariant::HeatGeodesic => "heat-geodesic",
        })
    }
}

impl FromStr for ChernoffVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "general" => Ok(ChernoffVariant::General),
            "driftless-corrected" | "driftlesscorrected" => Ok(ChernoffVariant::DriftlessCorrected),
            "driftless-literal" | "driftlessliteral" => Ok(ChernoffVariant::DriftlessLiteral),
            "heat-geodesic" | "heatgeodesic" => Ok(ChernoffVariant::HeatGeodesic),
            other => Err(Error::Parse(format!("unknown variant '{other}'"))),
        }
    }
}

/// Variant plus solver settings for applying `S(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChernoffPlan {
    pub variant: ChernoffVariant,
    pub ode: OdeSettings,
    /// Maximum number of leaf evaluations for `iterate_tree`.
    pub budget: u64,
    /// Replaces the weight of every signed branch. Fault injection only:
    /// the weights then no longer sum to one.
    pub signed_weight_override: Option<f64>,
}

pub const DEFAULT_TREE_BUDGET: u64 = 10_000_000;

impl ChernoffPlan {
    pub fn new(variant: ChernoffVariant) -> Self {
        ChernoffPlan { variant, ode: OdeSettings::default(), budget: DEFAULT_TREE_BUDGET, signed_weight_override: None }
    }

    pub fn with_ode(mut self, ode: OdeSettings) -> Self {
        self.ode = ode;
        self
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_signed_weight(mut self, w: f64) -> Self {
        self.signed_weight_override = Some(w);
        self
    }
}

/// Shifted evaluation points of one application of `S(t)` at `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSet {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    /// `t c(x)` (General variant with a potential), otherwise 0.
    pub potential_term: f64,
}

#[derive(Clone, Debug)]
enum Move {
    Flow { field: usize, time: f64 },
    Geodesic { k: usize, sign: f64, time: f64 },
    Stay,
}

/// `S(t)` for one fixed `t`, with all per-variant data resolved.
///
/// Branch order: `+A_1, -A_1, ..., +A_r, -A_r` then `A_0` (General), or
/// `+e_1, -e_1, ..., +e_d, -e_d` (HeatGeodesic).
#[derive(Clone, Debug)]
pub struct ChernoffOp {
    manifold: Arc<dyn Manifold>,
    variant: ChernoffVariant,
    t: f64,
    fields: Vec<VectorField>,
    moves: Vec<Move>,
    weights: Vec<f64>,
    weight_total: f64,
    potential: Option<ScalarField>,
    ode: OdeSettings,
    sqrt_d: f64,
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl ChernoffOp {
    pub fn new(spec: &GeneratorSpec, plan: &ChernoffPlan, t: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("t must be finite and >= 0, got {t}")));
        }
        let m = spec.manifold().clone();
        let r = spec.r() as u64;
        let d = spec.d() as u64;
        let mut fields = Vec::new();
        let mut moves = Vec::new();
        let mut weights: Vec<Ratio<u64>> = Vec::new();
        let mut potential = None;
        match plan.variant {
            ChernoffVariant::General => {
                let step = (2.0 * r as f64 * t).sqrt();
                for a in spec.fields() {
                    fields.push(a.clone());
                    moves.push(Move::Flow { field: fields.len() - 1, time: step });
                    fields.push(a.negated());
                    moves.push(Move::Flow { field: fields.len() - 1, time: step });
                    weights.push(Ratio::new(1, 4 * r));
                    weights.push(Ratio::new(1, 4 * r));
                }
                if spec.drift_is_zero() {
                    moves.push(Move::Stay);
                } else {
                    fields.push(spec.drift().clone());
                    moves.push(Move::Flow { field: fields.len() - 1, time: 2.0 * t });
                }
                weights.push(Ratio::new(1, 2));
                potential = spec.potential().cloned();
            }
            ChernoffVariant::DriftlessCorrected | ChernoffVariant::DriftlessLiteral => {
                check_driftless(spec)?;
                let step = if plan.variant == ChernoffVariant::DriftlessCorrected {
                    (r as f64 * t).sqrt()
                } else {
                    (2.0 * r as f64 * t).sqrt()
                };
                for a in spec.fields() {
                    fields.push(a.clone());
                    moves.push(Move::Flow { field: fields.len() - 1, time: step });
                    fields.push(a.negated());
                    moves.push(Move::Flow { field: fields.len() - 1, time: step });
                    weights.push(Ratio::new(1, 2 * r));
                    weights.push(Ratio::new(1, 2 * r));
                }
            }
            ChernoffVariant::HeatGeodesic => {
                if spec.potential().is_some() {
                    return Err(Error::VariantIncompatible("heat-geodesic takes no potential".into()));
                }
                let probe = m.default_point();
                m.frame_raw(probe.coords()).map_err(|e| Error::VariantIncompatible(format!("heat-geodesic: {e}")))?;
                for k in 0..d as usize {
                    for sign in [1.0, -1.0] {
                        moves.push(Move::Geodesic { k, sign, time: t.sqrt() });
                        weights.push(Ratio::new(1, 2 * d));
                    }
                }
            }
        }
        let total: Ratio<u64> = weights.iter().copied().sum();
        debug_assert_eq!(total, Ratio::from_integer(1));
        let mut weights: Vec<f64> = weights.into_iter().map(ratio_to_f64).collect();
        let mut weight_total = ratio_to_f64(total);
        if let Some(w) = plan.signed_weight_override {
            let signed = match plan.variant {
                ChernoffVariant::General => weights.len() - 1,
                _ => weights.len(),
            };
            weights[..signed].iter_mut().for_each(|v| *v = w);
            weight_total = weights.iter().map(|v| v.abs()).sum();
        }
        Ok(ChernoffOp {
            manifold: m,
            variant: plan.variant,
            t,
            fields,
            moves,
            weights,
            weight_total,
            potential,
            ode: plan.ode,
            sqrt_d: (d as f64).sqrt(),
        })
    }

    pub fn variant(&self) -> ChernoffVariant {
        self.variant
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn manifold(&self) -> &Arc<dyn Manifold> {
        &self.manifold
    }

    pub fn branch_count(&self) -> usize {
        self.moves.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ |w_b|`: exactly 1 unless the weights were overridden.
    pub fn weight_total(&self) -> f64 {
        self.weight_total
    }

    pub fn has_potential(&self) -> bool {
        self.potential.is_some()
    }

    /// True when branch `b` leaves the point where it is.
    pub fn is_stay(&self, b: usize) -> bool {
        matches!(self.moves[b], Move::Stay)
    }

    /// Shifted point of branch `b` from `x`.
    pub fn branch_point(&self, x: &[f64], b: usize) -> Result<Coords> {
        if self.t == 0.0 {
            return Ok(Coords::from_slice(x));
        }
        match &self.moves[b] {
            Move::Stay => Ok(Coords::from_slice(x)),
            Move::Flow { field, time } => flow_raw(&self.fields[*field], x, *time, &self.ode),
            Move::Geodesic { k, sign, time } => {
                let frame = self.manifold.frame_raw(x)?;
                let v: Coords = frame[*k].iter().map(|c| c * sign * self.sqrt_d).collect();
                self.manifold.geodesic_raw(x, &v, *time)
            }
        }
    }

    pub fn branch_points(&self, x: &[f64]) -> Result<Vec<Coords>> {
        (0..self.moves.len()).map(|b| self.branch_point(x, b)).collect()
    }

    /// `t c(x)`, or 0 without a potential.
    pub fn potential_term(&self, x: &[f64]) -> f64 {
        self.potential.as_ref().map_or(0.0, |c| self.t * c.eval(x))
    }

    /// `(S(t) f)(x)`.
    pub fn apply<F: Fn(&[f64]) -> f64 + ?Sized>(&self, f: &F, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for b in 0..self.moves.len() {
            let p = self.branch_point(x, b)?;
            acc += self.weights[b] * f(&p);
        }
        if self.potential.is_some() {
            acc += self.potential_term(x) * f(x);
        }
        Ok(acc)
    }
}

/// Driftless variants need `A_0 = 0` and `c = 0`. A derived drift counts as
/// zero when it vanishes to 1e-8 on the spot-check sample.
fn check_driftless(spec: &GeneratorSpec) -> Result<()> {
    if spec.potential().is_some() {
        return Err(Error::VariantIncompatible("driftless variants need c = 0".into()));
    }
    if spec.drift_is_zero() {
        return Ok(());
    }
    for x in default_sample(spec.manifold().as_ref()) {
        let a0 = spec.drift().eval_raw(x.coords());
        let n = spec.manifold().norm(x.coords(), &a0);
        if n > 1e-8 {
            return Err(Error::VariantIncompatible(format!(
                "driftless variants need A_0 = 0, but |A_0| = {n:e} at {:?}",
                x.coords()
            )));
        }
    }
    Ok(())
}

pub fn branch_set(spec: &GeneratorSpec, plan: &ChernoffPlan, t: f64, x: &Point) -> Result<BranchSet> {
    spec.manifold().check_point(x)?;
    let op = ChernoffOp::new(spec, plan, t)?;
    let points = op.branch_points(x.coords())?.into_iter().map(Point::from_coords).collect();
    Ok(BranchSet { points, weights: op.weights.clone(), potential_term: op.potential_term(x.coords()) })
}

/// `(S(t) f)(x)`.
pub fn apply_s(spec: &GeneratorSpec, plan: &ChernoffPlan, t: f64, f: &ScalarField, x: &Point) -> Result<f64> {
    spec.manifold().check_point(x)?;
    let op = ChernoffOp::new(spec, plan, t)?;
    op.apply(&|p: &[f64]| f.eval(p), x.coords())
}

/// `(S(t/n)^n f)(x)` by full recursion over the branch tree.
pub fn iterate_tree(spec: &GeneratorSpec, plan: &ChernoffPlan, t: f64, n: usize, f: &ScalarField, x: &Point) -> Result<f64> {
    spec.manifold().check_point(x)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let op = ChernoffOp::new(spec, plan, t / n as f64)?;
    let per_node = op.branch_count() + usize::from(op.has_potential());
    let needed = (per_node as f64).powi(n as i32);
    if needed > plan.budget as f64 {
        return Err(Error::BudgetExceeded { needed, budget: plan.budget });
    }
    tree_rec(&op, f, x.coords(), n)
}

fn tree_rec(op: &ChernoffOp, f: &ScalarField, x: &[f64], depth: usize) -> Result<f64> {
    if depth == 0 {
        return Ok(f.eval(x));
    }
    let mut acc = 0.0;
    for b in 0..op.branch_count() {
        let p = op.branch_point(x, b)?;
        acc += op.weights[b] * tree_rec(op, f, &p, depth - 1)?;
    }
    if op.has_potential() {
        acc += op.potential_term(x) * tree_rec(op, f, x, depth - 1)?;
    }
    Ok(acc)
}

/// `max_x |(S(t)f - f)/t - (L_0 f + c f)|` over the sample.
pub fn consistency_defect(
    spec: &GeneratorSpec,
    plan: &ChernoffPlan,
    t: f64,
    f: &ScalarField,
    sample: &[Point],
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("consistency defect needs t > 0, got {t}")));
    }
    let op = ChernoffOp::new(spec, plan, t)?;
    let mut worst = 0.0f64;
    for x in sample {
        spec.manifold().check_point(x)?;
        let xs = x.coords();
        let s = op.apply(&|p: &[f64]| f.eval(p), xs)?;
        let lf = apply_generator_raw(spec, f, xs, &plan.ode)?;
        worst = worst.max(((s - f.eval(xs)) / t - lf).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DriftPolicy;
    use crate::manifold::ManifoldId;
    use approx::assert_relative_eq;

    fn quad_spec() -> GeneratorSpec {
        let e: Arc<dyn Manifold> = Arc::new(ManifoldId::Euclidean(1));
        GeneratorSpec::new(
            e.clone(),
            vec![VectorField::constant(e.clone(), &[1.0]).unwrap()],
            DriftPolicy::Explicit(VectorField::zero(e)),
            None,
            true,
        )
        .unwrap()
    }

    fn circle_spec() -> GeneratorSpec {
        let c: Arc<dyn Manifold> = Arc::new(ManifoldId::Circle);
        GeneratorSpec::new(c.clone(), vec![VectorField::frame(c, 1).unwrap()], DriftPolicy::DerivedLinkA, None, true)
            .unwrap()
    }

    fn square() -> ScalarField {
        ScalarField::from_fn("x^2", |x| x[0] * x[0])
    }

    #[test]
    fn branch_set_examples() {
        let spec = quad_spec();
        let plan = ChernoffPlan::new(ChernoffVariant::General);
        let x = Point::new([0.25]);
        let b = branch_set(&spec, &plan, 0.5, &x).unwrap();
        let pts: Vec<f64> = b.points.iter().map(|p| p.coords()[0]).collect();
        assert_eq!(pts, vec![1.25, -0.75, 0.25]);
        assert_eq!(b.weights, vec![0.25, 0.25, 0.5]);

        for variant in [ChernoffVariant::General, ChernoffVariant::DriftlessCorrected, ChernoffVariant::HeatGeodesic] {
            let b = branch_set(&spec, &ChernoffPlan::new(variant), 0.0, &x).unwrap();
            assert!(b.points.iter().all(|p| *p == x));
            assert_relative_eq!(b.weights.iter().sum::<f64>(), 1.0);
        }

        let c = circle_spec();
        let b = branch_set(&c, &ChernoffPlan::new(ChernoffVariant::HeatGeodesic), 0.25, &Point::new([1.0])).unwrap();
        assert_relative_eq!(b.points[0].coords()[0], 1.5);
        assert_relative_eq!(b.points[1].coords()[0], 0.5);
        assert_eq!(b.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn apply_s_examples() {
        let spec = quad_spec();
        let plan = ChernoffPlan::new(ChernoffVariant::General);
        for (x, t) in [(0.3, 0.1), (-2.0, 1.7)] {
            let v = apply_s(&spec, &plan, t, &square(), &Point::new([x])).unwrap();
            assert_relative_eq!(v, x * x + t, epsilon = 1e-12);
            assert_eq!(apply_s(&spec, &plan, t, &ScalarField::constant(1.0), &Point::new([x])).unwrap(), 1.0);
        }
        let c = circle_spec();
        let v = apply_s(&c, &ChernoffPlan::new(ChernoffVariant::HeatGeodesic), 0.3, &ScalarField::cos_of(0), &Point::new([0.7]))
            .unwrap();
        assert_relative_eq!(v, 0.7f64.cos() * 0.3f64.sqrt().cos(), epsilon = 1e-14);
    }

    #[test]
    fn iterate_tree_examples() {
        let spec = quad_spec();
        let plan = ChernoffPlan::new(ChernoffVariant::General);
        let x = Point::new([0.4]);
        assert_eq!(
            iterate_tree(&spec, &plan, 0.6, 1, &square(), &x).unwrap(),
            apply_s(&spec, &plan, 0.6, &square(), &x).unwrap()
        );
        for n in [1, 2, 4, 8] {
            let v = iterate_tree(&spec, &plan, 1.0, n, &square(), &x).unwrap();
            assert!((v - 1.16).abs() <= 1e-10, "n={n}: {v}");
        }
        let c = circle_spec();
        let v = iterate_tree(&c, &ChernoffPlan::new(ChernoffVariant::HeatGeodesic), 1.0, 4, &ScalarField::cos_of(0), &Point::new([0.0]))
            .unwrap();
        assert_relative_eq!(v, 0.5f64.cos().powi(4), epsilon = 1e-14);
        let small = ChernoffPlan::new(ChernoffVariant::General).with_budget(100);
        assert!(matches!(iterate_tree(&spec, &small, 1.0, 5, &square(), &x), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn consistency_examples() {
        let spec = quad_spec();
        let plan = ChernoffPlan::new(ChernoffVariant::General);
        let sample: Vec<Point> = [-1.0, 0.0, 2.0].iter().map(|v| Point::new([*v])).collect();
        for t in [0.5, 0.01] {
            assert!(consistency_defect(&spec, &plan, t, &ScalarField::constant(2.0), &sample).unwrap() <= 1e-12);
            let sq = square().with_derivatives(|x| (Coords::from_slice(&[2.0 * x[0]]), nalgebra::DMatrix::from_element(1, 1, 2.0)));
            assert!(consistency_defect(&spec, &plan, t, &sq, &sample).unwrap() <= 1e-10);
        }
        let c = circle_spec();
        let heat = ChernoffPlan::new(ChernoffVariant::HeatGeodesic);
        let pts: Vec<Point> = (0..32).map(|i| Point::new([i as f64 * std::f64::consts::TAU / 32.0])).collect();
        let d: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|t| consistency_defect(&c, &heat, *t, &ScalarField::cos_of(0), &pts).unwrap())
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2]);
        for w in d.windows(2) {
            assert!((1.3..=2.9).contains(&(w[0] / w[1])));
        }
    }

    #[test]
    fn driftless_rejects_drift() {
        let h: Arc<dyn Manifold> = Arc::new(ManifoldId::HyperbolicHalfPlane);
        let fs = vec![VectorField::frame(h.clone(), 1).unwrap(), VectorField::frame(h.clone(), 2).unwrap()];
        let spec = GeneratorSpec::new(h, fs, DriftPolicy::DerivedLinkA, None, true).unwrap();
        let r = ChernoffOp::new(&spec, &ChernoffPlan::new(ChernoffVariant::DriftlessCorrected), 0.1);
        assert!(matches!(r, Err(Error::VariantIncompatible(_))));
        let s: Arc<dyn Manifold> = Arc::new(ManifoldId::Sphere2);
        let fs = (1..=3).map(|k| VectorField::rotational(s.clone(), k).unwrap()).collect();
        let spec = GeneratorSpec::new(s, fs, DriftPolicy::DerivedLinkA, None, true).unwrap();
        assert!(ChernoffOp::new(&spec, &ChernoffPlan::new(ChernoffVariant::DriftlessCorrected), 0.1).is_ok());
        let r = ChernoffOp::new(&spec, &ChernoffPlan::new(ChernoffVariant::HeatGeodesic), 0.1);
        assert!(matches!(r, Err(Error::VariantIncompatible(_))));
    }
}
