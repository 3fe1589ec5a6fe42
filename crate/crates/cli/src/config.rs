//! JSON experiment configuration.
//!
//! Field constructors use the strings accepted by
//! [`feller_core::fields::parse_field`] (`frame:1`, `rotational:2`,
//! `constant:[1,0]`, `custom:[..]`, `zero`); `f`, the potential and custom
//! fields share one expression grammar over the chart coordinates.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use feller_core::chernoff::{ChernoffPlan, ChernoffVariant, GridKind, Interp};
use feller_core::ode::{OdeMethod, OdeSettings};
use feller_core::fields::parse_field;
use feller_core::reference::HeatKernelId;
use feller_core::walks::PathKind;
use feller_core::{DriftPolicy, Error, GeneratorSpec, Manifold, ManifoldId, Point, Result, ScalarField};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftConfig {
    DerivedLinkA,
    Explicit(String),
    DerivedLinkAPlusB(String),
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig::DerivedLinkA
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Only needed when the file is used on its own (e.g. `oracle fd`).
    #[serde(default)]
    pub manifold: Option<String>,
    pub fields: Vec<String>,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub potential: Option<String>,
    #[serde(default = "yes")]
    pub feller: bool,
    /// `false` skips the spanning check, for degenerate walk experiments.
    #[serde(default = "yes")]
    pub check_ellipticity: bool,
}

fn yes() -> bool {
    true
}

impl GeneratorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn build(&self, manifold: ManifoldId) -> Result<GeneratorSpec> {
        let m: Arc<dyn Manifold> = Arc::new(manifold);
        let fields = self.fields.iter().map(|s| parse_field(m.clone(), s)).collect::<Result<Vec<_>>>()?;
        let policy = match &self.drift {
            DriftConfig::DerivedLinkA => DriftPolicy::DerivedLinkA,
            DriftConfig::Explicit(s) => DriftPolicy::Explicit(parse_field(m.clone(), s)?),
            DriftConfig::DerivedLinkAPlusB(s) => DriftPolicy::DerivedLinkAPlusB(parse_field(m.clone(), s)?),
        };
        let potential = self.potential.as_deref().map(|s| ScalarField::from_expr(s, m.as_ref())).transpose()?;
        if self.check_ellipticity {
            GeneratorSpec::new(m, fields, policy, potential, self.feller)
        } else {
            GeneratorSpec::unchecked(m, fields, policy, potential, self.feller)
        }
    }

    /// Manifold from `override_id`, else from the file.
    pub fn manifold_id(&self, override_id: Option<&str>) -> Result<ManifoldId> {
        match override_id.or(self.manifold.as_deref()) {
            Some(s) => ManifoldId::from_str(s),
            None => Err(Error::InvalidArgument("no manifold given (flag or \"manifold\" in the generator file)".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Grid,
    Tree,
    Mc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per axis (`[n]`, `[n1, n2]` or `[nlat, nlon]`).
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub interp: Option<String>,
}

impl GridConfig {
    pub fn kind(&self, m: ManifoldId) -> Result<GridKind> {
        match (m, self.nodes.as_slice()) {
            (ManifoldId::Circle, [n]) => Ok(GridKind::Circle { n: *n }),
            (ManifoldId::Torus2, [n1, n2]) => Ok(GridKind::Torus2 { n1: *n1, n2: *n2 }),
            (ManifoldId::Torus2, [n]) => Ok(GridKind::Torus2 { n1: *n, n2: *n }),
            (ManifoldId::Sphere2, [nlat, nlon]) => Ok(GridKind::Sphere2 { nlat: *nlat, nlon: *nlon }),
            (other, nodes) => Err(Error::Unsupported(format!("no grid on {other} with nodes {nodes:?}"))),
        }
    }

    pub fn interp(&self, kind: GridKind) -> Result<Interp> {
        match self.interp.as_deref() {
            None => Ok(feller_core::chernoff::GridFunction::default_interp(kind)),
            Some("linear") => Ok(Interp::Linear),
            Some("cubic") | Some("cubic-periodic") => Ok(Interp::CubicPeriodic),
            Some(other) => Err(Error::Parse(format!("unknown interpolation '{other}'"))),
        }
    }
}

/// Which independent result a run is compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleConfig {
    /// A heat-kernel tag such as `wrapped-s1` or `hyperbolic-h2`.
    Kernel(String),
    /// Crank–Nicolson on the config grid with this many time steps.
    Fd { steps: usize },
    /// A closed-form expression in the coordinates and `t`.
    Expr(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    #[serde(default = "default_kind")]
    pub kind: PathKind,
    /// Coordinate whose law is compared with `reference`.
    #[serde(default)]
    pub coordinate: usize,
    /// `normal:<variance>` or `point-mass:<a>`.
    #[serde(default)]
    pub reference: Option<String>,
    /// `(δ, ε)` pairs for modulus-of-continuity tails.
    #[serde(default)]
    pub moc: Vec<(f64, f64)>,
    /// Paths used for the modulus tails (they are stored in full).
    #[serde(default)]
    pub moc_paths: Option<usize>,
}

/// Overrides for the flow integrator; absent entries keep the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub h0: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl OdeConfig {
    pub fn settings(&self) -> Result<OdeSettings> {
        let mut s = OdeSettings::default();
        if let Some(m) = &self.method {
            s.method = OdeMethod::from_str(m)?;
        }
        if let Some(t) = self.tol {
            s.tol = t;
        }
        if self.h0.is_some() {
            s.h_init = self.h0;
        }
        if let Some(k) = self.max_steps {
            s.max_steps = k;
        }
        s.validate()?;
        Ok(s)
    }
}

fn default_kind() -> PathKind {
    PathKind::Jump
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    pub manifold: String,
    pub generator: GeneratorConfig,
    #[serde(default = "default_variant")]
    pub variant: ChernoffVariant,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub f: String,
    pub t: f64,
    pub n_schedule: Vec<usize>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    /// Evaluation points for `tree` and `mc`.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub walk: Option<WalkConfig>,
    #[serde(default)]
    pub ode: Option<OdeConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

fn default_variant() -> ChernoffVariant {
    ChernoffVariant::General
}

fn default_strategy() -> Strategy {
    Strategy::Grid
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn manifold_id(&self) -> Result<ManifoldId> {
        ManifoldId::from_str(&self.manifold)
    }

    pub fn spec(&self) -> Result<GeneratorSpec> {
        self.generator.build(self.manifold_id()?)
    }

    pub fn plan(&self) -> Result<ChernoffPlan> {
        let plan = ChernoffPlan::new(self.variant);
        match &self.ode {
            Some(o) => Ok(plan.with_ode(o.settings()?)),
            None => Ok(plan),
        }
    }

    pub fn function(&self) -> Result<ScalarField> {
        ScalarField::from_expr(&self.f, &self.manifold_id()?)
    }

    pub fn eval_points(&self) -> Result<Vec<Point>> {
        let m = self.manifold_id()?;
        if self.points.is_empty() {
            return Ok(vec![m.default_point()]);
        }
        self.points.iter().map(|p| m.point(p)).collect()
    }

    pub fn oracle_kernel(&self) -> Result<Option<HeatKernelId>> {
        match &self.oracle {
            Some(OracleConfig::Kernel(s)) => Ok(Some(HeatKernelId::from_str(s)?)),
            _ => Ok(None),
        }
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        if self.n_schedule.is_empty() || self.n_schedule.windows(2).any(|w| w[1] <= w[0]) || self.n_schedule[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "n_schedule must be non-empty, positive and strictly increasing, got {:?}",
                self.n_schedule
            )));
        }
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return Err(Error::InvalidArgument(format!("t must be finite and >= 0, got {}", self.t)));
        }
        self.spec()?;
        self.plan()?;
        self.function()?;
        self.eval_points()?;
        self.oracle_kernel()?;
        if let Some(OracleConfig::Expr(e)) = &self.oracle {
            oracle_expr(e, self.manifold_id()?)?;
        }
        if self.strategy == Strategy::Grid {
            let g = self.grid.as_ref().ok_or_else(|| Error::InvalidArgument("grid strategy needs a \"grid\" block".into()))?;
            let kind = g.kind(self.manifold_id()?)?;
            g.interp(kind)?;
        }
        if self.strategy == Strategy::Mc && self.samples.unwrap_or(0) < 2 {
            return Err(Error::InvalidArgument("mc strategy needs \"samples\" >= 2".into()));
        }
        if let Some(w) = &self.walk {
            if let Some(r) = &w.reference {
                parse_reference(r)?;
            }
        }
        Ok(())
    }
}

/// Closed-form oracle: an expression in the coordinates plus `t`.
pub fn oracle_expr(src: &str, m: ManifoldId) -> Result<feller_core::expr::Expr> {
    let mut vars = feller_core::expr::coordinate_table(&m);
    vars.push(("t".to_string(), m.coord_len()));
    feller_core::expr::Expr::parse(src, &vars)
}

/// Reference laws for KS diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    Normal(f64),
    PointMass(f64),
}

pub fn parse_reference(s: &str) -> Result<Reference> {
    let bad = || Error::Parse(format!("unknown reference '{s}' (normal:<var> or point-mass:<a>)"));
    let (head, arg) = s.split_once(':').ok_or_else(bad)?;
    let v: f64 = arg.trim().parse().map_err(|_| bad())?;
    match head.trim() {
        "normal" if v > 0.0 => Ok(Reference::Normal(v)),
        "point-mass" => Ok(Reference::PointMass(v)),
        _ => Err(bad()),
    }
}

pub fn reference_cdf(r: Reference) -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
    match r {
        Reference::Normal(v) => Box::new(feller_core::walks::normal_cdf(v)),
        Reference::PointMass(a) => Box::new(feller_core::walks::point_mass_cdf(a)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CIRCLE: &str = r#"{
        "manifold": "circle",
        "generator": {"fields": ["frame:1"]},
        "variant": "heat-geodesic",
        "f": "cos(x)",
        "t": 1.0,
        "n_schedule": [8, 16],
        "grid": {"nodes": [128], "interp": "cubic"},
        "oracle": {"kernel": "wrapped-s1"}
    }"#;

    #[test]
    fn parses_and_builds() {
        let c = ExperimentConfig::from_json(CIRCLE).unwrap();
        assert_eq!(c.variant, ChernoffVariant::HeatGeodesic);
        assert_eq!(c.spec().unwrap().r(), 1);
        assert_eq!(c.oracle_kernel().unwrap(), Some(HeatKernelId::WrappedGaussS1));
    }

    #[test]
    fn schedule_must_increase() {
        let bad = CIRCLE.replace("[8, 16]", "[16, 8]");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn unknown_constructor_rejected() {
        let bad = CIRCLE.replace("frame:1", "spiral:1");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn drift_forms() {
        let g: GeneratorConfig = serde_json::from_str(r#"{"fields": ["constant:[1]"], "drift": {"explicit": "zero"}}"#).unwrap();
        assert_eq!(g.drift, DriftConfig::Explicit("zero".into()));
        let g: GeneratorConfig = serde_json::from_str(r#"{"fields": ["constant:[1]"], "drift": "derived-link-a"}"#).unwrap();
        assert_eq!(g.drift, DriftConfig::DerivedLinkA);
    }
}
