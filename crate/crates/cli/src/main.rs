use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use feller_cli::config::{parse_reference, reference_cdf, ExperimentConfig, GeneratorConfig};
use feller_cli::experiments::{
    run_convergence, run_values, run_walk_study, write_convergence_csv, write_values_csv, write_grid_csv, write_paths_csv, write_walk_csv,
};
use feller_cli::validation::{outcome_line, run_validation_suite, ValidationOptions};
use feller_core::chernoff::{GridFunction, GridKind};
use feller_core::reference::{exact_semigroup, fd_solve, FdSolverSettings, HeatKernelId};
use feller_core::rng::mean_stderr;
use feller_core::walks::{ks_distance_to, path_seed, sample_endpoints, sample_path, PathKind, WalkStats};
use feller_core::{Error, Manifold, ManifoldId, ScalarField};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "feller", version, about = "Chernoff approximations of diffusion semigroups on manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence study of S(t/n)^n against an oracle.
    Chernoff {
        #[command(subcommand)]
        action: ChernoffCmd,
    },
    /// Random-walk sampling and statistics.
    Walk {
        #[command(subcommand)]
        action: WalkCmd,
    },
    /// Reference solutions.
    Oracle {
        #[command(subcommand)]
        action: OracleCmd,
    },
    /// Run the acceptance criteria.
    Validate {
        /// Criterion ids or tags (comma separated).
        #[arg(long, value_delimiter = ',')]
        filter: Vec<String>,
        /// Replace every signed branch weight (fault injection).
        #[arg(long)]
        tamper_weight: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON verdict here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ChernoffCmd {
    /// Compute S(t/n)^n f; with an oracle in the config, also a convergence study.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        /// Values CSV; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON summary output (stdout when absent).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Experiment config; its entries override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    f: Option<String>,
    #[arg(long)]
    t: Option<f64>,
    /// One n or a comma separated schedule.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    grid_nodes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ode_method: Option<String>,
    #[arg(long)]
    ode_tol: Option<f64>,
    #[arg(long)]
    ode_h0: Option<f64>,
    #[arg(long)]
    ode_max_steps: Option<usize>,
    /// Convergence table CSV (needs an oracle in the config).
    #[arg(long)]
    convergence_out: Option<PathBuf>,
}

impl RunFlags {
    /// Flags first, then the config file on top, then the usual validation.
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut v = serde_json::Map::new();
        let mut put = |k: &str, x: Value| {
            v.insert(k.to_string(), x);
        };
        if let Some(g) = &self.generator {
            let text = std::fs::read_to_string(g).map_err(|e| io_failure(g, e))?;
            let g: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", g.display())))?;
            put("generator", g);
        }
        if let Some(m) = &self.manifold {
            put("manifold", json!(m));
        }
        if let Some(x) = &self.variant {
            put("variant", json!(x));
        }
        if let Some(x) = &self.f {
            put("f", json!(x));
        }
        if let Some(x) = self.t {
            put("t", json!(x));
        }
        if !self.n.is_empty() {
            put("n_schedule", json!(self.n));
        }
        if let Some(x) = &self.strategy {
            put("strategy", json!(x));
        }
        if let Some(x) = self.grid_nodes {
            put("grid", json!({ "nodes": [x] }));
        }
        if let Some(x) = self.samples {
            put("samples", json!(x));
        }
        if let Some(x) = self.seed {
            put("seed", json!(x));
        }
        let mut ode = serde_json::Map::new();
        if let Some(x) = &self.ode_method {
            ode.insert("method".into(), json!(x));
        }
        if let Some(x) = self.ode_tol {
            ode.insert("tol".into(), json!(x));
        }
        if let Some(x) = self.ode_h0 {
            ode.insert("h0".into(), json!(x));
        }
        if let Some(x) = self.ode_max_steps {
            ode.insert("max_steps".into(), json!(x));
        }
        if !ode.is_empty() {
            put("ode", Value::Object(ode));
        }
        if let Some(c) = &self.config {
            let text = std::fs::read_to_string(c).map_err(|e| io_failure(c, e))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", c.display())))?;
            let Value::Object(file) = file else {
                return Err(Failure::Usage(format!("{}: config must be a JSON object", c.display())));
            };
            v.extend(file);
        }
        // The generator file may name the manifold; use it when nothing else does.
        if !v.contains_key("manifold") {
            if let Some(m) = v.get("generator").and_then(|g| g.get("manifold")).cloned() {
                v.insert("manifold".into(), m);
            }
        }
        if let Some(Value::Object(g)) = v.get_mut("generator") {
            g.remove("manifold");
        }
        Ok(ExperimentConfig::from_json(&Value::Object(v).to_string())?)
    }
}

#[derive(Args, Clone)]
struct WalkArgs {
    /// Experiment config; its manifold, generator, t, last n, seed and walk kind override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "jump")]
    kind: String,
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start point (comma separated stored coordinates).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum WalkCmd {
    /// Sample paths and write them as CSV.
    Sample {
        #[command(flatten)]
        common: WalkArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean of f(X_n(t)) and KS distance to a reference law, as JSON.
    Stats {
        #[command(flatten)]
        common: WalkArgs,
        #[arg(long)]
        f: String,
        /// `normal:<variance>` or `point-mass:<a>`.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, default_value_t = 0)]
        coordinate: usize,
    },
    /// Walk statistics across the config's n schedule.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Closed-form heat semigroup at one point.
    Eval {
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        f: String,
        #[arg(long)]
        t: f64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
    },
    /// Crank–Nicolson solution on a periodic grid.
    Fd {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        manifold: Option<String>,
        #[arg(long)]
        f0: String,
        #[arg(long)]
        t: f64,
        /// Nodes per axis.
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(_) | Error::InvalidArgument(_) | Error::Unsupported(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn emit_json(v: &impl Serialize, path: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Run(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| io_failure(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Settings shared by `walk sample` and `walk stats`, after `--generator`.
struct WalkSetup {
    spec: feller_core::GeneratorSpec,
    kind: PathKind,
    x: feller_core::Point,
    t: f64,
    n: usize,
    m: ManifoldId,
    seed: u64,
}

#[derive(Serialize)]
struct WalkMeta<'a> {
    kind: PathKind,
    manifold: String,
    generator: &'a GeneratorConfig,
    t: f64,
    n: usize,
    paths: usize,
    seed: u64,
    x: Vec<f64>,
}

fn walk_setup(a: &WalkArgs) -> Result<(WalkSetup, GeneratorConfig), Failure> {
    let cfg = a.config.as_ref().map(|p| ExperimentConfig::load(p)).transpose()?;
    let g = match (&cfg, &a.generator) {
        (Some(c), _) => c.generator.clone(),
        (None, Some(p)) => GeneratorConfig::load(p)?,
        (None, None) => return Err(Failure::Usage("--generator is required".into())),
    };
    let m = match &cfg {
        Some(c) => c.manifold_id()?,
        None => g.manifold_id(a.manifold.as_deref())?,
    };
    let spec = g.build(m)?;
    let kind = match cfg.as_ref().and_then(|c| c.walk.as_ref()) {
        Some(w) => w.kind,
        None => PathKind::from_str(&a.kind)?,
    };
    let x = match (&cfg, &a.x) {
        (Some(c), _) if !c.points.is_empty() => m.point(&c.points[0])?,
        (_, Some(c)) => m.point(c)?,
        _ => m.default_point(),
    };
    let t = match &cfg {
        Some(c) => c.t,
        None => a.t.ok_or_else(|| Failure::Usage("--t is required".into()))?,
    };
    let n = match &cfg {
        Some(c) => *c.n_schedule.last().expect("validated schedule"),
        None => a.n.ok_or_else(|| Failure::Usage("--n is required".into()))?,
    };
    let seed = cfg.as_ref().map_or(a.seed, |c| c.seed);
    Ok((WalkSetup { spec, kind, x, t, n, m, seed }, g))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Chernoff { action: ChernoffCmd::Run { flags, out, summary } } => {
            let cfg = flags.resolve()?;
            let values = run_values(&cfg)?;
            if let Some(p) = out.as_ref().or(cfg.output.as_ref()) {
                write_values_csv(create(p)?, &cfg, &values)?;
            }
            let convergence = match cfg.oracle {
                Some(_) => Some(run_convergence(&cfg)?),
                None => None,
            };
            if let (Some(r), Some(p)) = (&convergence, &flags.convergence_out) {
                write_convergence_csv(create(p)?, r)?;
            }
            let failed = convergence.as_ref().is_some_and(|r| r.rows.iter().any(|row| row.failure.is_some()));
            emit_json(&json!({ "values": values, "convergence": convergence }), summary.as_deref())?;
            Ok(if failed { EXIT_FAIL } else { 0 })
        }
        Command::Walk { action: WalkCmd::Sample { common, out } } => {
            let (w, g) = walk_setup(&common)?;
            let paths = (0..common.paths as u64)
                .map(|i| sample_path(w.kind, &w.spec, &w.x, w.t, w.n, path_seed(w.seed, i)))
                .collect::<feller_core::Result<Vec<_>>>()?;
            let meta = WalkMeta {
                kind: w.kind,
                manifold: w.m.to_string(),
                generator: &g,
                t: w.t,
                n: w.n,
                paths: common.paths,
                seed: w.seed,
                x: w.x.coords().to_vec(),
            };
            write_paths_csv(create(&out)?, w.seed, &meta, &paths)?;
            Ok(0)
        }
        Command::Walk { action: WalkCmd::Stats { common, f, reference, coordinate } } => {
            let (w, _) = walk_setup(&common)?;
            let f = ScalarField::from_expr(&f, &w.m)?;
            if common.paths < 2 {
                return Err(Failure::Usage("--paths must be at least 2".into()));
            }
            let ends = sample_endpoints(&w.spec, &w.x, w.t, w.n, common.paths, w.seed)?;
            let (mean_f, stderr_f) = mean_stderr(&ends.iter().map(|y| f.eval(y)).collect::<Vec<_>>());
            let ks_distance = match reference {
                Some(r) => {
                    if coordinate >= w.m.coord_len() {
                        return Err(Failure::Usage(format!("--coordinate {coordinate} out of range")));
                    }
                    let cdf = reference_cdf(parse_reference(&r)?);
                    Some(ks_distance_to(cdf.as_ref(), &ends.iter().map(|y| y[coordinate]).collect::<Vec<_>>())?)
                }
                None => None,
            };
            let stats = WalkStats { t: w.t, n: w.n, n_samples: common.paths, mean_f, stderr_f, ks_distance, moc_tail: None };
            emit_json(&stats, None)?;
            Ok(0)
        }
        Command::Walk { action: WalkCmd::Study { config, out } } => {
            let cfg = ExperimentConfig::load(&config)?;
            let study = run_walk_study(&cfg)?;
            if let Some(p) = out.as_ref().or(cfg.output.as_ref()) {
                write_walk_csv(create(p)?, &study)?;
            }
            emit_json(&study, None)?;
            Ok(0)
        }
        Command::Oracle { action: OracleCmd::Eval { kernel, f, t, x } } => {
            let k = HeatKernelId::from_str(&kernel)?;
            let m = k.manifold();
            let f = ScalarField::from_expr(&f, &m)?;
            let v = exact_semigroup(k, &f, t, &m.point(&x)?)?;
            println!("{v:.15e}");
            Ok(0)
        }
        Command::Oracle { action: OracleCmd::Fd { generator, manifold, f0, t, nodes, steps, out } } => {
            let g = GeneratorConfig::load(&generator)?;
            let m = g.manifold_id(manifold.as_deref())?;
            let spec = g.build(m)?;
            let kind = match m {
                ManifoldId::Circle => GridKind::Circle { n: nodes },
                ManifoldId::Torus2 => GridKind::Torus2 { n1: nodes, n2: nodes },
                other => return Err(Failure::Usage(format!("oracle fd runs on circle or torus2, not {other}"))),
            };
            let f = ScalarField::from_expr(&f0, &m)?;
            let start = GridFunction::sample(kind, GridFunction::default_interp(kind), &f)?;
            let u = fd_solve(&spec, &start, t, &FdSolverSettings::with_steps(steps))?;
            #[derive(Serialize)]
            struct FdMeta<'a> {
                manifold: String,
                generator: &'a GeneratorConfig,
                f0: &'a str,
                t: f64,
                nodes: usize,
                steps: usize,
            }
            let meta = FdMeta { manifold: m.to_string(), generator: &g, f0: &f0, t, nodes, steps };
            write_grid_csv(create(&out)?, &meta, &u)?;
            Ok(0)
        }
        Command::Validate { filter, tamper_weight, seed, json } => {
            let report = run_validation_suite(&ValidationOptions { filter, tamper_weight, seed });
            {
                let mut err = io::stderr().lock();
                for o in &report.criteria {
                    let _ = writeln!(err, "{}", outcome_line(o));
                }
            }
            emit_json(&report, json.as_deref())?;
            Ok(if report.all_passed() { 0 } else { EXIT_FAIL })
        }
    }
}

fn cap_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("CHERNOFF_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Failure::Usage(format!("CHERNOFF_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Failure::Usage("CHERNOFF_THREADS must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Run(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cap_threads().and_then(|_| run(cli));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
