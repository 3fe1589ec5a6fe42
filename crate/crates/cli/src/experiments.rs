//! Convergence and walk studies over an `n` schedule.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use feller_core::chernoff::{iterate_grid, iterate_mc, iterate_tree, GridFunction};
use feller_core::reference::{exact_semigroup, exact_semigroup_grid, fd_solve, FdSolverSettings};
use feller_core::rng::mean_stderr;
use feller_core::walks::{ks_distance_to, modulus_of_continuity, path_seed, sample_endpoints, sample_path, PathKind, PathSample, WalkStats};
use feller_core::{Error, GeneratorSpec, Point, Result, ScalarField};

use crate::config::{oracle_expr, parse_reference, reference_cdf, ExperimentConfig, OracleConfig, Strategy, SCHEMA_VERSION};

/// Errors at or below this count as exact (the slope fit is skipped).
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub error_sup: Option<f64>,
    pub stderr: Option<f64>,
    pub wall_time: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub schema: u32,
    pub seed: u64,
    pub rows: Vec<ConvergenceRow>,
    pub slope: Option<f64>,
    pub exact: bool,
    pub config: ExperimentConfig,
}

/// Least-squares slope of `log e` against `log n`; `None` when fewer than two
/// points have positive error.
pub fn loglog_slope(ns: &[f64], errors: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        ns.iter().zip(errors).filter(|(_, e)| **e > 0.0 && e.is_finite()).map(|(n, e)| (n.ln(), e.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

enum Oracle {
    Grid(GridFunction),
    Points(Vec<f64>),
}

fn closed_form(cfg: &ExperimentConfig, src: &str, x: &[f64]) -> Result<f64> {
    let e = oracle_expr(src, cfg.manifold_id()?)?;
    let mut v = x.to_vec();
    v.push(cfg.t);
    Ok(e.eval(&v))
}

fn grid_f0(cfg: &ExperimentConfig, f: &ScalarField) -> Result<GridFunction> {
    let g = cfg.grid.as_ref().ok_or_else(|| Error::InvalidArgument("this oracle needs a \"grid\" block".into()))?;
    let kind = g.kind(cfg.manifold_id()?)?;
    GridFunction::sample(kind, g.interp(kind)?, f)
}

fn oracle(cfg: &ExperimentConfig, spec: &GeneratorSpec, f: &ScalarField, points: &[Point]) -> Result<Oracle> {
    let o = cfg.oracle.as_ref().ok_or_else(|| Error::InvalidArgument("oracle unavailable: no \"oracle\" configured".into()))?;
    let on_grid = cfg.strategy == Strategy::Grid;
    match o {
        OracleConfig::Kernel(_) => {
            let k = cfg.oracle_kernel()?.expect("kernel oracle");
            if on_grid {
                Ok(Oracle::Grid(exact_semigroup_grid(k, f, cfg.t, &grid_f0(cfg, f)?)?))
            } else {
                points.iter().map(|x| exact_semigroup(k, f, cfg.t, x)).collect::<Result<_>>().map(Oracle::Points)
            }
        }
        OracleConfig::Fd { steps } => {
            let u = fd_solve(spec, &grid_f0(cfg, f)?, cfg.t, &FdSolverSettings::with_steps(*steps))?;
            if on_grid {
                Ok(Oracle::Grid(u))
            } else {
                Ok(Oracle::Points(points.iter().map(|x| u.eval(x.coords())).collect()))
            }
        }
        OracleConfig::Expr(src) => {
            if on_grid {
                let f0 = grid_f0(cfg, f)?;
                let vals =
                    (0..f0.values().len()).map(|i| closed_form(cfg, src, &f0.node(i))).collect::<Result<Vec<_>>>()?;
                Ok(Oracle::Grid(f0.with_values(vals)?))
            } else {
                points.iter().map(|x| closed_form(cfg, src, x.coords())).collect::<Result<_>>().map(Oracle::Points)
            }
        }
    }
}

fn row(cfg: &ExperimentConfig, spec: &GeneratorSpec, f: &ScalarField, points: &[Point], truth: &Oracle, n: usize) -> Result<(f64, Option<f64>)> {
    let plan = cfg.plan()?;
    match (cfg.strategy, truth) {
        (Strategy::Grid, Oracle::Grid(g)) => {
            let f0 = grid_f0(cfg, f)?;
            Ok((iterate_grid(spec, &plan, cfg.t, n, &f0)?.sup_distance(g)?, None))
        }
        (Strategy::Tree, Oracle::Points(v)) => {
            let mut worst = 0.0f64;
            for (x, want) in points.iter().zip(v) {
                worst = worst.max((iterate_tree(spec, &plan, cfg.t, n, f, x)? - want).abs());
            }
            Ok((worst, None))
        }
        (Strategy::Mc, Oracle::Points(v)) => {
            let samples = cfg.samples.unwrap_or(0);
            let (mut worst, mut se) = (0.0f64, 0.0f64);
            for (i, (x, want)) in points.iter().zip(v).enumerate() {
                let est = iterate_mc(spec, &plan, cfg.t, n, f, x, samples, path_seed(cfg.seed, (n as u64) << 16 | i as u64))?;
                worst = worst.max((est.mean - want).abs());
                se = se.max(est.stderr);
            }
            Ok((worst, Some(se)))
        }
        _ => unreachable!("oracle shape follows the strategy"),
    }
}

/// Error against the oracle for every `n` in the schedule, plus the fitted
/// log-log slope. A failing row is recorded and does not stop the run.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let f = cfg.function()?;
    let points = cfg.eval_points()?;
    let truth = oracle(cfg, &spec, &f, &points)?;
    let rows: Vec<ConvergenceRow> = cfg
        .n_schedule
        .par_iter()
        .map(|&n| {
            let start = Instant::now();
            let r = row(cfg, &spec, &f, &points, &truth, n);
            let wall_time = start.elapsed().as_secs_f64();
            match r {
                Ok((e, se)) => ConvergenceRow { n, error_sup: Some(e), stderr: se, wall_time, failure: None },
                Err(e) => ConvergenceRow { n, error_sup: None, stderr: None, wall_time, failure: Some(e.to_string()) },
            }
        })
        .collect();
    let ok: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.error_sup.is_some()).collect();
    let exact = !ok.is_empty() && ok.iter().all(|r| r.error_sup.unwrap() <= EXACT_TOL);
    let slope = if exact {
        None
    } else {
        let ns: Vec<f64> = ok.iter().map(|r| r.n as f64).collect();
        let es: Vec<f64> = ok.iter().map(|r| r.error_sup.unwrap()).collect();
        loglog_slope(&ns, &es)
    };
    Ok(ConvergenceReport { schema: SCHEMA_VERSION, seed: cfg.seed, rows, slope, exact, config: cfg.clone() })
}

/// One computed value of `S(t/n)^n f` at a point or grid node.
#[derive(Clone, Debug, Serialize)]
pub struct ValueRow {
    pub n: usize,
    pub point_or_node: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

fn serde_tag(v: &impl Serialize) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn coords_label(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}

/// `S(t/n)^n f` for every `n` in the schedule, without any oracle.
pub fn run_values(cfg: &ExperimentConfig) -> Result<Vec<ValueRow>> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let plan = cfg.plan()?;
    let f = cfg.function()?;
    let points = cfg.eval_points()?;
    let mut out = Vec::new();
    for &n in &cfg.n_schedule {
        match cfg.strategy {
            Strategy::Grid => {
                let u = iterate_grid(&spec, &plan, cfg.t, n, &grid_f0(cfg, &f)?)?;
                for (i, v) in u.values().iter().enumerate() {
                    out.push(ValueRow { n, point_or_node: i.to_string(), value: *v, stderr: None });
                }
            }
            Strategy::Tree => {
                for x in &points {
                    let v = iterate_tree(&spec, &plan, cfg.t, n, &f, x)?;
                    out.push(ValueRow { n, point_or_node: coords_label(x.coords()), value: v, stderr: None });
                }
            }
            Strategy::Mc => {
                let samples = cfg.samples.unwrap_or(0);
                for (i, x) in points.iter().enumerate() {
                    let est = iterate_mc(&spec, &plan, cfg.t, n, &f, x, samples, path_seed(cfg.seed, (n as u64) << 16 | i as u64))?;
                    out.push(ValueRow {
                        n,
                        point_or_node: coords_label(x.coords()),
                        value: est.mean,
                        stderr: Some(est.stderr),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn header<W: Write>(w: &mut W, seed: u64, config: &impl Serialize) -> std::io::Result<()> {
    let json = serde_json::to_string(config).unwrap_or_default();
    writeln!(w, "# schema={SCHEMA_VERSION} seed={seed} config={json}")
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("write failed: {e}"))
}

pub fn write_convergence_csv<W: Write>(mut w: W, r: &ConvergenceReport) -> Result<()> {
    header(&mut w, r.seed, &r.config).map_err(io_err)?;
    let mut c = csv_writer(w);
    c.write_record(["n", "error_sup", "stderr", "wall_time", "failure"]).map_err(io_err)?;
    for row in &r.rows {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        c.write_record([
            row.n.to_string(),
            opt(row.error_sup),
            opt(row.stderr),
            format!("{:.6}", row.wall_time),
            row.failure.clone().unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    c.flush().map_err(io_err)
}

/// Columns: variant, strategy, t, n, point_or_node, value, stderr (empty
/// unless mc). Grid rows name the node by its index.
pub fn write_values_csv<W: Write>(mut w: W, cfg: &ExperimentConfig, rows: &[ValueRow]) -> Result<()> {
    header(&mut w, cfg.seed, cfg).map_err(io_err)?;
    let mut c = csv_writer(w);
    c.write_record(["variant", "strategy", "t", "n", "point_or_node", "value", "stderr"]).map_err(io_err)?;
    let (variant, strategy) = (serde_tag(&cfg.variant), serde_tag(&cfg.strategy));
    for r in rows {
        c.write_record([
            variant.clone(),
            strategy.clone(),
            format!("{}", cfg.t),
            r.n.to_string(),
            r.point_or_node.clone(),
            format!("{:.17e}", r.value),
            r.stderr.map(|v| format!("{v:e}")).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    c.flush().map_err(io_err)
}

#[derive(Clone, Debug, Serialize)]
pub struct WalkStudy {
    pub schema: u32,
    pub seed: u64,
    pub kind: PathKind,
    pub rows: Vec<WalkStats>,
    pub config: ExperimentConfig,
}

/// Mean of `f(X_n(t))`, KS distance of one coordinate to the reference law,
/// and modulus-of-continuity tails, for every `n` in the schedule.
pub fn run_walk_study(cfg: &ExperimentConfig) -> Result<WalkStudy> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let f = cfg.function()?;
    let x = cfg.eval_points()?.remove(0);
    let walk = cfg.walk.clone().ok_or_else(|| Error::InvalidArgument("walk study needs a \"walk\" block".into()))?;
    let samples = cfg.samples.ok_or_else(|| Error::InvalidArgument("walk study needs \"samples\"".into()))?;
    if samples < 2 {
        return Err(Error::InvalidArgument("walk study needs at least 2 samples".into()));
    }
    let cdf = walk.reference.as_deref().map(parse_reference).transpose()?.map(reference_cdf);
    let mut rows = Vec::new();
    for &n in &cfg.n_schedule {
        let ends = sample_endpoints(&spec, &x, cfg.t, n, samples, path_seed(cfg.seed, n as u64))?;
        let (mean_f, stderr_f) = mean_stderr(&ends.iter().map(|y| f.eval(y)).collect::<Vec<_>>());
        let ks_distance = match &cdf {
            Some(c) => {
                let coord = walk.coordinate;
                if coord >= x.coords().len() {
                    return Err(Error::InvalidArgument(format!("coordinate {coord} out of range")));
                }
                Some(ks_distance_to(c.as_ref(), &ends.iter().map(|y| y[coord]).collect::<Vec<_>>())?)
            }
            None => None,
        };
        let moc_tail = if walk.moc.is_empty() {
            None
        } else {
            let paths = walk.moc_paths.unwrap_or(samples.min(2000));
            Some(moc_tails(&spec, walk.kind, &x, cfg.t, n, paths, path_seed(cfg.seed ^ 0x5eed, n as u64), &walk.moc)?)
        };
        rows.push(WalkStats { t: cfg.t, n, n_samples: samples, mean_f, stderr_f, ks_distance, moc_tail });
    }
    Ok(WalkStudy { schema: SCHEMA_VERSION, seed: cfg.seed, kind: walk.kind, rows, config: cfg.clone() })
}

/// `P̂(w(γ, δ) > ε)` over `paths` sampled paths, for each `(δ, ε)`.
#[allow(clippy::too_many_arguments)]
pub fn moc_tails(
    spec: &GeneratorSpec,
    kind: PathKind,
    x: &Point,
    t: f64,
    n: usize,
    paths: usize,
    seed: u64,
    pairs: &[(f64, f64)],
) -> Result<Vec<(f64, f64, f64)>> {
    let m = spec.manifold().clone();
    let ws: Vec<Vec<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = sample_path(kind, spec, x, t, n, path_seed(seed, i))?;
            pairs.iter().map(|(d, _)| modulus_of_continuity(m.as_ref(), &p, *d)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(k, &(d, e))| (d, e, ws.iter().filter(|w| w[k] > e).count() as f64 / paths as f64))
        .collect())
}

/// Number of seeded paths whose interpolated skeleton differs from the
/// jump chain at some `m/n`.
pub fn skeleton_audit(spec: &GeneratorSpec, kind: PathKind, x: &Point, t: f64, n: usize, paths: usize, seed: u64) -> Result<usize> {
    let mut bad = 0;
    for i in 0..paths as u64 {
        let s = path_seed(seed, i);
        let jump = sample_path(PathKind::Jump, spec, x, t, n, s)?;
        let other = sample_path(kind, spec, x, t, n, s)?;
        let (a, b) = (jump.skeleton(), other.skeleton());
        if a.len() != b.len() || a.iter().zip(&b).any(|(p, q)| p.coords() != q.coords()) {
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn write_walk_csv<W: Write>(mut w: W, s: &WalkStudy) -> Result<()> {
    header(&mut w, s.seed, &s.config).map_err(io_err)?;
    let mut c = csv_writer(w);
    c.write_record(["n", "t", "samples", "mean_f", "stderr_f", "ks_distance", "delta", "epsilon", "moc_tail"]).map_err(io_err)?;
    for r in &s.rows {
        let ks = r.ks_distance.map(|v| format!("{v:e}")).unwrap_or_default();
        let base = [r.n.to_string(), r.t.to_string(), r.n_samples.to_string(), format!("{:e}", r.mean_f), format!("{:e}", r.stderr_f), ks];
        match &r.moc_tail {
            Some(tails) if !tails.is_empty() => {
                for (d, e, p) in tails {
                    let mut rec = base.to_vec();
                    rec.extend([d.to_string(), e.to_string(), p.to_string()]);
                    c.write_record(&rec).map_err(io_err)?;
                }
            }
            _ => {
                let mut rec = base.to_vec();
                rec.extend([String::new(), String::new(), String::new()]);
                c.write_record(&rec).map_err(io_err)?;
            }
        }
    }
    c.flush().map_err(io_err)
}

/// `path_id, time, coord_1..coord_k` rows.
pub fn write_paths_csv<W: Write>(mut w: W, seed: u64, meta: &impl Serialize, paths: &[PathSample]) -> Result<()> {
    header(&mut w, seed, meta).map_err(io_err)?;
    let mut c = csv_writer(w);
    let k = paths.first().map(|p| p.points[0].coords().len()).unwrap_or(0);
    let mut head = vec!["path_id".to_string(), "time".to_string()];
    head.extend((1..=k).map(|i| format!("coord{i}")));
    c.write_record(&head).map_err(io_err)?;
    for (id, p) in paths.iter().enumerate() {
        for (t, x) in p.times.iter().zip(&p.points) {
            let mut rec = vec![id.to_string(), format!("{t}")];
            rec.extend(x.coords().iter().map(|v| format!("{v}")));
            c.write_record(&rec).map_err(io_err)?;
        }
    }
    c.flush().map_err(io_err)
}

/// `coord_1..coord_k, value` rows for a grid function.
pub fn write_grid_csv<W: Write>(mut w: W, meta: &impl Serialize, g: &GridFunction) -> Result<()> {
    header(&mut w, 0, meta).map_err(io_err)?;
    let mut c = csv_writer(w);
    let k = g.node(0).len();
    let mut head: Vec<String> = (1..=k).map(|i| format!("coord{i}")).collect();
    head.push("value".into());
    c.write_record(&head).map_err(io_err)?;
    for (i, v) in g.values().iter().enumerate() {
        let mut rec: Vec<String> = g.node(i).iter().map(|c| format!("{c}")).collect();
        rec.push(format!("{v}"));
        c.write_record(&rec).map_err(io_err)?;
    }
    c.flush().map_err(io_err)
}
