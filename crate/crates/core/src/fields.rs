//! Vector fields, scalar fields and generator data `L = ½ Σ A_k A_k + A_0 + c`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::flows;
use crate::manifold::{Coords, Manifold, ManifoldId, Point, TangentVector};
use crate::ode::OdeSettings;

type EvalFn = dyn Fn(&[f64]) -> Coords + Send + Sync;
type JacFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;
type FlowFn = dyn Fn(&[f64], f64) -> Coords + Send + Sync;
type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type DerivFn = dyn Fn(&[f64]) -> (Coords, DMatrix<f64>) + Send + Sync;

/// Finite-difference step used for first derivatives of fields.
pub fn h_fd(x: &[f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-5 * n.max(1.0)
}

/// Step for second differences along flows. A second difference divides
/// rounding noise by `h²`, so it needs a larger step than `h_fd`.
pub fn h_fd2(x: &[f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-4 * n.max(1.0)
}

/// User-declared bounds `c1 = sup ‖A‖_g`, `c2 = sup ‖∇A‖_g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldBounds {
    pub c1: f64,
    pub c2: f64,
}

#[derive(Clone)]
pub struct VectorField {
    manifold: Arc<dyn Manifold>,
    eval: Arc<EvalFn>,
    jacobian: Option<Arc<JacFn>>,
    exact_flow: Option<Arc<FlowFn>>,
    bounds: Option<FieldBounds>,
    constant: bool,
    zero: bool,
    label: String,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VectorField({} on {})", self.label, self.manifold.label())
    }
}

impl VectorField {
    /// Field from a closure returning stored-coordinate components.
    pub fn from_fn<F>(manifold: Arc<dyn Manifold>, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> Coords + Send + Sync + 'static,
    {
        VectorField {
            manifold,
            eval: Arc::new(f),
            jacobian: None,
            exact_flow: None,
            bounds: None,
            constant: false,
            zero: false,
            label: label.into(),
        }
    }

    pub fn zero(manifold: Arc<dyn Manifold>) -> Self {
        let n = manifold.coord_len();
        let d = manifold.dim();
        let mut f = Self::from_fn(manifold, "zero", move |_| std::iter::repeat_n(0.0, n).collect());
        f.zero = true;
        f.constant = true;
        f.jacobian = Some(Arc::new(move |_| DMatrix::zeros(d, d)));
        f.exact_flow = Some(Arc::new(|x, _| Coords::from_slice(x)));
        f.bounds = Some(FieldBounds { c1: 0.0, c2: 0.0 });
        f
    }

    /// Field with constant components in the global chart.
    pub fn constant(manifold: Arc<dyn Manifold>, comps: &[f64]) -> Result<Self> {
        if !manifold.has_global_chart() {
            return Err(Error::InvalidArgument(format!(
                "constant fields need a global chart; {} has none",
                manifold.label()
            )));
        }
        if comps.len() != manifold.coord_len() {
            return Err(Error::InvalidArgument(format!(
                "constant field needs {} components, got {}",
                manifold.coord_len(),
                comps.len()
            )));
        }
        if comps.iter().all(|c| *c == 0.0) {
            return Ok(Self::zero(manifold));
        }
        let v: Coords = comps.iter().copied().collect();
        let d = manifold.dim();
        let mm = manifold.clone();
        let v2 = v.clone();
        let flat = manifold.is_flat();
        let c1 = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut f = Self::from_fn(manifold, format!("constant:{comps:?}"), move |_| v.clone());
        f.constant = true;
        f.jacobian = Some(Arc::new(move |_| DMatrix::zeros(d, d)));
        f.exact_flow = Some(Arc::new(move |x, t| {
            let mut y: Coords = x.iter().zip(&v2).map(|(a, b)| a + t * b).collect();
            mm.canonicalize(&mut y);
            y
        }));
        if flat {
            f.bounds = Some(FieldBounds { c1, c2: 0.0 });
        }
        Ok(f)
    }

    /// The `k`-th (1-based) orthonormal frame field of a parallelizable manifold.
    pub fn frame(manifold: Arc<dyn Manifold>, k: usize) -> Result<Self> {
        let d = manifold.dim();
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!("frame index {k} out of range 1..={d}")));
        }
        match manifold.builtin() {
            Some(ManifoldId::Sphere2) => Err(Error::NotParallelizable(manifold.label())),
            Some(ManifoldId::HyperbolicHalfPlane) => {
                let mut f = if k == 1 {
                    let mut f = Self::from_fn(manifold, "frame:1", |x| Coords::from_slice(&[x[1], 0.0]));
                    f.jacobian = Some(Arc::new(|_| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])));
                    f.exact_flow = Some(Arc::new(|x, t| Coords::from_slice(&[x[0] + t * x[1], x[1]])));
                    f
                } else {
                    let mut f = Self::from_fn(manifold, "frame:2", |x| Coords::from_slice(&[0.0, x[1]]));
                    f.jacobian = Some(Arc::new(|_| DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])));
                    f.exact_flow = Some(Arc::new(|x, t| Coords::from_slice(&[x[0], x[1] * t.exp()])));
                    f
                };
                f.bounds = Some(FieldBounds { c1: 1.0, c2: 1.0 });
                Ok(f)
            }
            Some(ManifoldId::Euclidean(_)) | Some(ManifoldId::Circle) | Some(ManifoldId::Torus2) => {
                let mut e = vec![0.0; d];
                e[k - 1] = 1.0;
                let mut f = Self::constant(manifold, &e)?;
                f.label = format!("frame:{k}");
                Ok(f)
            }
            None => {
                let m = manifold.clone();
                Ok(Self::from_fn(manifold, format!("frame:{k}"), move |x| {
                    m.frame_raw(x).map(|fr| fr[k - 1].clone()).unwrap_or_else(|_| std::iter::repeat_n(f64::NAN, x.len()).collect())
                }))
            }
        }
    }

    /// Rotational Killing field `L_k(x) = e_k × x` on the sphere (1-based `k`).
    pub fn rotational(manifold: Arc<dyn Manifold>, k: usize) -> Result<Self> {
        if manifold.builtin() != Some(ManifoldId::Sphere2) {
            return Err(Error::InvalidArgument("rotational fields are defined on sphere2 only".into()));
        }
        if !(1..=3).contains(&k) {
            return Err(Error::InvalidArgument(format!("rotational index {k} out of range 1..=3")));
        }
        let axis = k - 1;
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let mut f = Self::from_fn(manifold, format!("rotational:{k}"), move |x| Coords::from_slice(&cross3(&e, x)));
        // chart-basis partials a_i · (e × b_j)
        f.jacobian = Some(Arc::new(move |x| {
            let (a, b) = crate::manifold::sphere_tangent_basis(x);
            let basis = [a, b];
            DMatrix::from_fn(2, 2, |i, j| dot3(&basis[i], &cross3(&e, &basis[j])))
        }));
        f.exact_flow = Some(Arc::new(move |x, t| {
            let (c, s) = (t.cos(), t.sin());
            let kx = cross3(&e, x);
            let kd = x[axis];
            let mut y: Coords = (0..3).map(|i| x[i] * c + kx[i] * s + e[i] * kd * (1.0 - c)).collect();
            let n = dot3(&y, &y).sqrt();
            y.iter_mut().for_each(|v| *v /= n);
            y
        }));
        f.bounds = Some(FieldBounds { c1: 1.0, c2: 1.0 });
        Ok(f)
    }

    /// Field given by one expression per stored coordinate. On the sphere the
    /// result is projected onto the tangent plane.
    pub fn custom(manifold: Arc<dyn Manifold>, exprs: &[&str]) -> Result<Self> {
        if exprs.len() != manifold.coord_len() {
            return Err(Error::InvalidArgument(format!(
                "custom field needs {} expressions, got {}",
                manifold.coord_len(),
                exprs.len()
            )));
        }
        let parsed: Vec<Expr> = exprs.iter().map(|s| Expr::for_manifold(s, manifold.as_ref())).collect::<Result<_>>()?;
        if parsed.iter().all(|e| e.is_constant()) && manifold.has_global_chart() {
            let v: Vec<f64> = parsed.iter().map(|e| e.eval(&[])).collect();
            let mut f = Self::constant(manifold, &v)?;
            f.label = format!("custom:[{}]", exprs.join(","));
            return Ok(f);
        }
        let m = manifold.clone();
        let label = format!("custom:[{}]", exprs.join(","));
        Ok(Self::from_fn(manifold, label, move |x| {
            let mut v: Coords = parsed.iter().map(|e| e.eval(x)).collect();
            m.project_tangent(x, &mut v);
            v
        }))
    }

    pub fn with_jacobian<F>(mut self, j: F) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(j));
        self
    }

    pub fn with_exact_flow<F>(mut self, flow: F) -> Self
    where
        F: Fn(&[f64], f64) -> Coords + Send + Sync + 'static,
    {
        self.exact_flow = Some(Arc::new(flow));
        self
    }

    pub fn with_bounds(mut self, c1: f64, c2: f64) -> Self {
        self.bounds = Some(FieldBounds { c1, c2 });
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// The field `-A`, whose flow runs the flow of `A` backwards.
    pub fn negated(&self) -> Self {
        let eval = self.eval.clone();
        VectorField {
            manifold: self.manifold.clone(),
            eval: Arc::new(move |x| eval(x).into_iter().map(|c| -c).collect()),
            jacobian: self.jacobian.clone().map(|j| -> Arc<JacFn> { Arc::new(move |x| -j(x)) }),
            exact_flow: self.exact_flow.clone().map(|fl| -> Arc<FlowFn> { Arc::new(move |x, t| fl(x, -t)) }),
            bounds: self.bounds,
            constant: self.constant,
            zero: self.zero,
            label: format!("-{}", self.label),
        }
    }

    pub fn manifold(&self) -> &Arc<dyn Manifold> {
        &self.manifold
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bounds(&self) -> Option<FieldBounds> {
        self.bounds
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn exact_flow_raw(&self, x: &[f64], t: f64) -> Option<Coords> {
        self.exact_flow.as_ref().map(|f| f(x, t))
    }

    /// Stored-coordinate components at `x` (unchecked).
    pub fn eval_raw(&self, x: &[f64]) -> Coords {
        (self.eval)(x)
    }

    pub fn eval(&self, x: &Point) -> Result<TangentVector> {
        self.manifold.check_point(x)?;
        Ok(TangentVector { base: x.clone(), comps: self.eval_raw(x.coords()) })
    }

    /// Components in the local chart centered at `x`.
    pub fn chart_eval(&self, x: &[f64]) -> Coords {
        self.manifold.chart_components(x, &self.eval_raw(x))
    }

    /// `∂_j A^i` in the local chart centered at `x`; analytic when supplied,
    /// central differences with step `h_fd` otherwise.
    pub fn jacobian_raw(&self, x: &[f64]) -> DMatrix<f64> {
        if let Some(j) = &self.jacobian {
            return j(x);
        }
        let m = &self.manifold;
        let d = m.dim();
        let h = h_fd(x);
        let mut jac = DMatrix::zeros(d, d);
        let mut u = vec![0.0; d];
        for j in 0..d {
            u[j] = h;
            let xp = m.chart_point(x, &u);
            u[j] = -h;
            let xm = m.chart_point(x, &u);
            u[j] = 0.0;
            let ap = m.chart_components(x, &self.eval_raw(&xp));
            let am = m.chart_components(x, &self.eval_raw(&xm));
            for i in 0..d {
                jac[(i, j)] = (ap[i] - am[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Derivative of `A` along its own flow, `d/ds A(φ_s(x))` at `s = 0`, in
    /// stored coordinates. This equals the acceleration of the integral curve.
    pub fn along_self(&self, x: &[f64], ode: &OdeSettings) -> Result<Coords> {
        if self.zero || (self.constant && self.manifold.has_global_chart()) {
            return Ok(std::iter::repeat_n(0.0, x.len()).collect());
        }
        let a = self.eval_raw(x);
        if let (Some(j), true) = (&self.jacobian, self.manifold.has_global_chart()) {
            let jm = j(x);
            let d = self.manifold.dim();
            return Ok((0..d).map(|i| (0..d).map(|k| jm[(i, k)] * a[k]).sum()).collect());
        }
        let h = h_fd(x);
        let xp = flows::flow_raw(self, x, h, ode)?;
        let xm = flows::flow_raw(self, x, -h, ode)?;
        let (ap, am) = (self.eval_raw(&xp), self.eval_raw(&xm));
        Ok(ap.iter().zip(&am).map(|(p, q)| (p - q) / (2.0 * h)).collect())
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Parses a field constructor string: `constant:[a,b]`, `frame:<k>`,
/// `rotational:<k>`, `custom:[expr1, expr2]` or `zero`.
pub fn parse_field(manifold: Arc<dyn Manifold>, spec: &str) -> Result<VectorField> {
    let spec = spec.trim();
    if spec == "zero" {
        return Ok(VectorField::zero(manifold));
    }
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("field constructor '{spec}' lacks ':'")))?;
    let arg = arg.trim();
    match kind.trim() {
        "constant" => {
            let comps: Vec<f64> = split_list(arg)?
                .iter()
                .map(|s| Expr::parse(s, &[]).map(|e| e.eval(&[])))
                .collect::<Result<_>>()?;
            VectorField::constant(manifold, &comps)
        }
        "frame" => VectorField::frame(manifold, parse_index(arg)?),
        "rotational" => VectorField::rotational(manifold, parse_index(arg)?),
        "custom" => {
            let items = split_list(arg)?;
            let refs: Vec<&str> = items.iter().map(String::as_str).collect();
            VectorField::custom(manifold, &refs)
        }
        other => Err(Error::Parse(format!("unknown field constructor '{other}'"))),
    }
}

fn parse_index(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse(format!("bad field index '{s}'")))
}

/// Splits `[a, b, c]` at top-level commas (a bare single item is accepted too).
fn split_list(s: &str) -> Result<Vec<String>> {
    let inner = match (s.strip_prefix('['), s.ends_with(']')) {
        (Some(rest), true) => &rest[..rest.len() - 1],
        (None, false) => s,
        _ => return Err(Error::Parse(format!("unbalanced brackets in '{s}'"))),
    };
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in inner.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if ch == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    out.push(cur.trim().to_string());
    if out.iter().any(|s| s.is_empty()) {
        return Err(Error::Parse(format!("empty item in '{s}'")));
    }
    Ok(out)
}

/// A real function on the manifold, optionally with its stored-coordinate
/// gradient and Hessian (ambient ones on the sphere).
#[derive(Clone)]
pub struct ScalarField {
    value: Arc<ScalarFn>,
    derivs: Option<Arc<DerivFn>>,
    label: String,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarField({})", self.label)
    }
}

impl ScalarField {
    pub fn from_fn<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarField { value: Arc::new(f), derivs: None, label: label.into() }
    }

    pub fn constant(k: f64) -> Self {
        let mut s = Self::from_fn(format!("{k}"), move |_| k);
        s.derivs = Some(Arc::new(|x: &[f64]| {
            (std::iter::repeat_n(0.0, x.len()).collect(), DMatrix::zeros(x.len(), x.len()))
        }));
        s
    }

    pub fn with_derivatives<D>(mut self, d: D) -> Self
    where
        D: Fn(&[f64]) -> (Coords, DMatrix<f64>) + Send + Sync + 'static,
    {
        self.derivs = Some(Arc::new(d));
        self
    }

    pub fn from_expr(src: &str, m: &dyn Manifold) -> Result<Self> {
        let e = Expr::for_manifold(src, m)?;
        let label = e.source().to_string();
        Ok(Self::from_fn(label, move |x| e.eval(x)))
    }

    /// `x ↦ x_k`, with exact derivatives.
    pub fn coordinate(k: usize) -> Self {
        Self::from_fn(format!("coord{k}"), move |x| x[k]).with_derivatives(move |x| {
            let mut g: Coords = std::iter::repeat_n(0.0, x.len()).collect();
            g[k] = 1.0;
            (g, DMatrix::zeros(x.len(), x.len()))
        })
    }

    /// `x ↦ cos(x_k)`, with exact derivatives.
    pub fn cos_of(k: usize) -> Self {
        Self::from_fn(format!("cos(x{k})"), move |x| x[k].cos()).with_derivatives(move |x| {
            let n = x.len();
            let mut g: Coords = std::iter::repeat_n(0.0, n).collect();
            g[k] = -x[k].sin();
            let mut h = DMatrix::zeros(n, n);
            h[(k, k)] = -x[k].cos();
            (g, h)
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn derivatives(&self, x: &[f64]) -> Option<(Coords, DMatrix<f64>)> {
        self.derivs.as_ref().map(|d| d(x))
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivs.is_some()
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

#[derive(Clone, Debug)]
pub enum DriftPolicy {
    Explicit(VectorField),
    DerivedLinkA,
    DerivedLinkAPlusB(VectorField),
}

/// The data `(A_1..A_r, A_0, c)` of a generator.
#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    manifold: Arc<dyn Manifold>,
    fields: Vec<VectorField>,
    policy: DriftPolicy,
    potential: Option<ScalarField>,
    feller: bool,
    drift: VectorField,
}

impl GeneratorSpec {
    /// Assembles and spot-checks the generator on a default sample of points.
    pub fn new(
        manifold: Arc<dyn Manifold>,
        fields: Vec<VectorField>,
        policy: DriftPolicy,
        potential: Option<ScalarField>,
        feller: bool,
    ) -> Result<Self> {
        let spec = Self::unchecked(manifold, fields, policy, potential, feller)?;
        let sample = default_sample(spec.manifold.as_ref());
        spec.validate_at(&sample)?;
        Ok(spec)
    }

    /// Assembles without the ellipticity spot check (degenerate generators
    /// are legitimate inputs for walks and tests).
    pub fn unchecked(
        manifold: Arc<dyn Manifold>,
        fields: Vec<VectorField>,
        policy: DriftPolicy,
        potential: Option<ScalarField>,
        feller: bool,
    ) -> Result<Self> {
        let label = manifold.label();
        let mismatch = |f: &VectorField| f.manifold().label() != label;
        if fields.iter().any(mismatch) {
            return Err(Error::InvalidArgument("all fields must live on the generator's manifold".into()));
        }
        match &policy {
            DriftPolicy::Explicit(b) | DriftPolicy::DerivedLinkAPlusB(b) if mismatch(b) => {
                return Err(Error::InvalidArgument("drift field lives on another manifold".into()));
            }
            _ => {}
        }
        if fields.len() < manifold.dim() {
            return Err(Error::InvalidArgument(format!(
                "need r >= d fields, got r = {} on a {}-dimensional manifold",
                fields.len(),
                manifold.dim()
            )));
        }
        let drift = match &policy {
            DriftPolicy::Explicit(a0) => a0.clone(),
            DriftPolicy::DerivedLinkA => derived_drift_field(&manifold, &fields, None),
            DriftPolicy::DerivedLinkAPlusB(b) => derived_drift_field(&manifold, &fields, Some(b.clone())),
        };
        Ok(GeneratorSpec { manifold, fields, policy, potential, feller, drift })
    }

    /// Ellipticity and (for Feller-flagged specs) sign checks at `sample`.
    pub fn validate_at(&self, sample: &[Point]) -> Result<()> {
        for x in sample {
            self.manifold.check_point(x)?;
            let s = self.min_singular_value(x.coords());
            if !(s > 1e-8) {
                return Err(Error::DegenerateFields { at: x.coords().to_vec(), sigma_min: s });
            }
            if self.feller {
                if let Some(c) = &self.potential {
                    let v = c.eval(x.coords());
                    if v > 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "potential c = {v} > 0 at {:?} for a Feller-flagged generator",
                            x.coords()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Smallest singular value of the r×d chart component matrix at `x`.
    pub fn min_singular_value(&self, x: &[f64]) -> f64 {
        let d = self.manifold.dim();
        let r = self.fields.len();
        let mut m = DMatrix::zeros(r, d);
        for (i, f) in self.fields.iter().enumerate() {
            let c = f.chart_eval(x);
            for j in 0..d {
                m[(i, j)] = c[j];
            }
        }
        m.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn manifold(&self) -> &Arc<dyn Manifold> {
        &self.manifold
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn r(&self) -> usize {
        self.fields.len()
    }

    pub fn d(&self) -> usize {
        self.manifold.dim()
    }

    pub fn policy(&self) -> &DriftPolicy {
        &self.policy
    }

    pub fn potential(&self) -> Option<&ScalarField> {
        self.potential.as_ref()
    }

    pub fn is_feller(&self) -> bool {
        self.feller
    }

    /// The resolved drift `A_0` (zero field when none).
    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn drift_is_zero(&self) -> bool {
        self.drift.is_zero()
    }

    pub fn without_potential(&self) -> Self {
        GeneratorSpec { potential: None, ..self.clone() }
    }

    pub fn with_potential(&self, c: ScalarField) -> Self {
        GeneratorSpec { potential: Some(c), ..self.clone() }
    }
}

fn derived_drift_field(manifold: &Arc<dyn Manifold>, fields: &[VectorField], extra: Option<VectorField>) -> VectorField {
    let fs: Vec<VectorField> = fields.to_vec();
    let n = manifold.coord_len();
    let label = if extra.is_some() { "linkA+B" } else { "linkA" };
    let extra2 = extra.clone();
    let f = VectorField::from_fn(manifold.clone(), label, move |x| {
        let mut out: Coords = std::iter::repeat_n(0.0, n).collect();
        for a in &fs {
            let div = covariant_divergence_raw(a, x);
            let v = a.eval_raw(x);
            for i in 0..n {
                out[i] += 0.5 * div * v[i];
            }
        }
        if let Some(b) = &extra2 {
            let v = b.eval_raw(x);
            for i in 0..n {
                out[i] += v[i];
            }
        }
        out
    });
    let all_constant = fields.iter().all(|a| a.is_constant() && a.manifold().is_flat());
    if all_constant && extra.is_none() {
        return VectorField::zero(manifold.clone()).with_label(label);
    }
    // constant fields on flat manifolds are divergence-free: exact zero drift
    f
}

/// `∇·A = Σ_j (∂_j A^j + A^j ∂_j log √|g|)` in the chart centered at `x`.
pub fn covariant_divergence(a: &VectorField, x: &Point) -> Result<f64> {
    a.manifold().check_point(x)?;
    Ok(covariant_divergence_raw(a, x.coords()))
}

pub fn covariant_divergence_raw(a: &VectorField, x: &[f64]) -> f64 {
    if a.is_zero() {
        return 0.0;
    }
    let m = a.manifold();
    let j = a.jacobian_raw(x);
    let comps = a.chart_eval(x);
    let g = m.grad_log_sqrt_det(x);
    (0..m.dim()).map(|k| j[(k, k)] + comps[k] * g[k]).sum()
}

/// `A_0(x)` under a derived drift policy.
pub fn derive_drift(spec: &GeneratorSpec, x: &Point) -> Result<TangentVector> {
    match spec.policy() {
        DriftPolicy::Explicit(_) => {
            Err(Error::InvalidArgument("derive_drift needs a DerivedLinkA or DerivedLinkAPlusB policy".into()))
        }
        _ => spec.drift().eval(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dominance {
    pub ok: bool,
    pub c_estimate: f64,
}

/// Smallest `c` with `(B·ξ)² ≤ c Σ_i (A_i·ξ)²` over the sample and all
/// covectors `ξ`. The supremum over `ξ` is the Rayleigh quotient maximum
/// `bᵀ (Σ A_i A_iᵀ)⁻¹ b`, evaluated exactly.
pub fn check_dominance(spec: &GeneratorSpec, b: &VectorField, sample: &[Point]) -> Result<Dominance> {
    let m = spec.manifold();
    let d = m.dim();
    let mut c_max = 0.0f64;
    for x in sample {
        m.check_point(x)?;
        let xs = x.coords();
        let s = spec.min_singular_value(xs);
        if !(s > 1e-8) {
            return Err(Error::DegenerateFields { at: xs.to_vec(), sigma_min: s });
        }
        let mut gram = DMatrix::zeros(d, d);
        for a in spec.fields() {
            let c = a.chart_eval(xs);
            for i in 0..d {
                for j in 0..d {
                    gram[(i, j)] += c[i] * c[j];
                }
            }
        }
        let bc = b.chart_eval(xs);
        let bv = nalgebra::DVector::from_iterator(d, bc.iter().copied());
        let sol = gram
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&bv))
            .ok_or_else(|| Error::DegenerateFields { at: xs.to_vec(), sigma_min: s })?;
        c_max = c_max.max(bv.dot(&sol));
    }
    Ok(Dominance { ok: c_max.is_finite(), c_estimate: c_max })
}

/// `(L_0 f)(x) + c(x) f(x)`.
///
/// Uses the analytic gradient/Hessian of `f` when present:
/// `A(Af) = Aᵀ H A + ∇f · (d/ds A∘φ_s)`. Otherwise second differences of
/// `s ↦ f(φ_s(x))` along each flow (step `h_fd2`) and a central first
/// difference along the drift flow.
pub fn apply_generator(spec: &GeneratorSpec, f: &ScalarField, x: &Point, ode: &OdeSettings) -> Result<f64> {
    spec.manifold().check_point(x)?;
    apply_generator_raw(spec, f, x.coords(), ode)
}

pub fn apply_generator_raw(spec: &GeneratorSpec, f: &ScalarField, x: &[f64], ode: &OdeSettings) -> Result<f64> {
    let fx = f.eval(x);
    let mut total = 0.0;
    if let Some((grad, hess)) = f.derivatives(x) {
        let n = x.len();
        for a in spec.fields() {
            let v = a.eval_raw(x);
            let acc = a.along_self(x, ode)?;
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += v[i] * hess[(i, j)] * v[j];
                }
                q += grad[i] * acc[i];
            }
            total += 0.5 * q;
        }
        if !spec.drift_is_zero() {
            let a0 = spec.drift().eval_raw(x);
            total += grad.iter().zip(&a0).map(|(g, a)| g * a).sum::<f64>();
        }
    } else {
        let h = h_fd2(x);
        for a in spec.fields() {
            if a.is_zero() {
                continue;
            }
            let fp = f.eval(&flows::flow_raw(a, x, h, ode)?);
            let fm = f.eval(&flows::flow_raw(a, x, -h, ode)?);
            total += 0.5 * (fp - 2.0 * fx + fm) / (h * h);
        }
        if !spec.drift_is_zero() {
            let h1 = h_fd(x);
            let a0 = spec.drift();
            let fp = f.eval(&flows::flow_raw(a0, x, h1, ode)?);
            let fm = f.eval(&flows::flow_raw(a0, x, -h1, ode)?);
            total += (fp - fm) / (2.0 * h1);
        }
    }
    if let Some(c) = spec.potential() {
        total += c.eval(x) * fx;
    }
    Ok(total)
}

/// Deterministic spot-check sample used when a spec is assembled.
pub fn default_sample(m: &dyn Manifold) -> Vec<Point> {
    let pts: Vec<Vec<f64>> = match m.builtin() {
        Some(ManifoldId::Circle) => (0..16).map(|i| vec![i as f64 * std::f64::consts::TAU / 16.0]).collect(),
        Some(ManifoldId::Torus2) => (0..36)
            .map(|i| {
                let s = std::f64::consts::TAU / 6.0;
                vec![(i % 6) as f64 * s, (i / 6) as f64 * s]
            })
            .collect(),
        Some(ManifoldId::HyperbolicHalfPlane) => {
            let mut v = Vec::new();
            for x in [-2.0, 0.0, 1.5] {
                for y in [0.25, 1.0, 4.0] {
                    v.push(vec![x, y]);
                }
            }
            v
        }
        Some(ManifoldId::Sphere2) => fibonacci_sphere(32),
        _ => {
            let d = m.dim();
            let mut v = vec![vec![0.0; d]];
            for k in 0..d {
                for s in [-1.5, 2.0] {
                    let mut p = vec![0.3; d];
                    p[k] = s;
                    v.push(p);
                }
            }
            v
        }
    };
    pts.into_iter().filter_map(|c| m.point(&c).ok()).collect()
}

/// Near-uniform points on the unit sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            vec![r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn arc(m: ManifoldId) -> Arc<dyn Manifold> {
        Arc::new(m)
    }

    #[test]
    fn divergence_examples() {
        let e1 = arc(ManifoldId::Euclidean(1));
        let a = VectorField::custom(e1.clone(), &["x"]).unwrap();
        assert_relative_eq!(covariant_divergence(&a, &Point::new([0.7])).unwrap(), 1.0, epsilon = 1e-9);

        let h = arc(ManifoldId::HyperbolicHalfPlane);
        let e2 = VectorField::frame(h.clone(), 2).unwrap();
        for p in [[0.0, 1.0], [3.0, 0.2], [-1.0, 5.0]] {
            assert_relative_eq!(covariant_divergence(&e2, &Point::new(p)).unwrap(), -1.0, epsilon = 1e-12);
        }
        // same field through finite differences
        let e2_fd = VectorField::custom(h, &["0", "y"]).unwrap();
        assert_relative_eq!(covariant_divergence(&e2_fd, &Point::new([0.4, 2.0])).unwrap(), -1.0, epsilon = 1e-8);

        let s = arc(ManifoldId::Sphere2);
        let l3 = VectorField::rotational(s.clone(), 3).unwrap();
        let l3_fd = VectorField::custom(s.clone(), &["-y", "x", "0"]).unwrap();
        for c in fibonacci_sphere(10) {
            let x = s.point(&c).unwrap();
            assert!(covariant_divergence(&l3, &x).unwrap().abs() < 1e-14);
            assert!(covariant_divergence(&l3_fd, &x).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn drift_examples() {
        let e = arc(ManifoldId::Euclidean(2));
        let fs = vec![VectorField::constant(e.clone(), &[1.0, 0.5]).unwrap(), VectorField::frame(e.clone(), 2).unwrap()];
        let spec = GeneratorSpec::new(e, fs, DriftPolicy::DerivedLinkA, None, true).unwrap();
        let a0 = derive_drift(&spec, &Point::new([1.0, 2.0])).unwrap();
        assert_eq!(&a0.comps[..], &[0.0, 0.0]);

        let h = arc(ManifoldId::HyperbolicHalfPlane);
        let fs = vec![VectorField::frame(h.clone(), 1).unwrap(), VectorField::frame(h.clone(), 2).unwrap()];
        let spec = GeneratorSpec::new(h, fs, DriftPolicy::DerivedLinkA, None, true).unwrap();
        let a0 = derive_drift(&spec, &Point::new([0.3, 2.0])).unwrap();
        assert_relative_eq!(a0.comps[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(a0.comps[1], -1.0, epsilon = 1e-12);

        let s = arc(ManifoldId::Sphere2);
        let fs: Vec<_> = [1, 2, 3].iter().map(|k| VectorField::custom(s.clone(), &[["0", "-z", "y"], ["z", "0", "-x"], ["-y", "x", "0"]][k - 1]).unwrap()).collect();
        let spec = GeneratorSpec::new(s.clone(), fs, DriftPolicy::DerivedLinkA, None, true).unwrap();
        for c in fibonacci_sphere(12) {
            let a0 = derive_drift(&spec, &s.point(&c).unwrap()).unwrap();
            assert!(a0.comps.iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn degenerate_fields_rejected() {
        let e = arc(ManifoldId::Euclidean(2));
        let fs = vec![VectorField::frame(e.clone(), 1).unwrap(), VectorField::frame(e.clone(), 1).unwrap()];
        let r = GeneratorSpec::new(e, fs, DriftPolicy::DerivedLinkA, None, true);
        assert!(matches!(r, Err(Error::DegenerateFields { .. })));
    }

    #[test]
    fn dominance_examples() {
        let e = arc(ManifoldId::Euclidean(1));
        let a1 = VectorField::constant(e.clone(), &[1.0]).unwrap();
        let spec = GeneratorSpec::new(e.clone(), vec![a1.clone()], DriftPolicy::DerivedLinkA, None, true).unwrap();
        let sample = default_sample(e.as_ref());
        let b3 = VectorField::constant(e.clone(), &[3.0]).unwrap();
        assert_relative_eq!(check_dominance(&spec, &b3, &sample).unwrap().c_estimate, 9.0, epsilon = 1e-12);
        assert!(check_dominance(&spec, &a1, &sample).unwrap().c_estimate <= 1.0 + 1e-8);
        assert_eq!(check_dominance(&spec, &VectorField::zero(e), &sample).unwrap().c_estimate, 0.0);
    }

    #[test]
    fn generator_examples() {
        let ode = OdeSettings::default();
        let e = arc(ManifoldId::Euclidean(1));
        let spec = GeneratorSpec::new(
            e.clone(),
            vec![VectorField::constant(e.clone(), &[1.0]).unwrap()],
            DriftPolicy::Explicit(VectorField::zero(e.clone())),
            None,
            true,
        )
        .unwrap();
        let sq = ScalarField::from_fn("x^2", |x| x[0] * x[0]);
        assert_relative_eq!(apply_generator(&spec, &sq, &Point::new([0.4]), &ode).unwrap(), 1.0, epsilon = 1e-7);

        let c = arc(ManifoldId::Circle);
        let spec = GeneratorSpec::new(c.clone(), vec![VectorField::frame(c, 1).unwrap()], DriftPolicy::DerivedLinkA, None, true).unwrap();
        let v = apply_generator(&spec, &ScalarField::cos_of(0), &Point::new([0.0]), &ode).unwrap();
        assert_relative_eq!(v, -0.5, epsilon = 1e-14);
        let v = apply_generator(&spec, &ScalarField::from_fn("cos", |x| x[0].cos()), &Point::new([0.0]), &ode).unwrap();
        assert_relative_eq!(v, -0.5, epsilon = 1e-7);

        let s = arc(ManifoldId::Sphere2);
        let fs: Vec<_> = (1..=3).map(|k| VectorField::rotational(s.clone(), k).unwrap()).collect();
        let spec = GeneratorSpec::new(s.clone(), fs, DriftPolicy::DerivedLinkA, None, true).unwrap();
        let north = s.point(&[0.0, 0.0, 1.0]).unwrap();
        let v = apply_generator(&spec, &ScalarField::coordinate(2), &north, &ode).unwrap();
        assert_relative_eq!(v, -1.0, epsilon = 1e-9);
        let z = ScalarField::from_fn("z", |x| x[2]);
        for c in fibonacci_sphere(6) {
            let x = s.point(&c).unwrap();
            let v = apply_generator(&spec, &z, &x, &ode).unwrap();
            assert_relative_eq!(v, -c[2], epsilon = 1e-6);
        }
    }

    #[test]
    fn parse_constructors() {
        let t = arc(ManifoldId::Torus2);
        let f = parse_field(t.clone(), "constant:[1, 0.5]").unwrap();
        assert_eq!(&f.eval_raw(&[0.0, 0.0])[..], &[1.0, 0.5]);
        let f = parse_field(t.clone(), "custom:[sin(theta1), cos(x + y)]").unwrap();
        assert_relative_eq!(f.eval_raw(&[1.0, 0.5])[1], 1.5f64.cos());
        assert!(parse_field(t.clone(), "rotational:1").is_err());
        assert!(parse_field(t.clone(), "frame:3").is_err());
        assert!(parse_field(t, "warp:1").is_err());
        let s = arc(ManifoldId::Sphere2);
        assert!(matches!(parse_field(s, "frame:1"), Err(Error::NotParallelizable(_))));
    }
}
