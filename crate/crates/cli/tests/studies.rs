use std::path::PathBuf;

use feller_cli::config::{ExperimentConfig, OracleConfig};
use feller_cli::experiments::{
    run_convergence, run_values, run_walk_study, skeleton_audit, write_convergence_csv, write_values_csv, EXACT_TOL,
};
use feller_cli::setups;
use feller_core::walks::PathKind;
use feller_core::{Error, Manifold, ManifoldId};

fn config(name: &str) -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&p).unwrap()
}

#[test]
fn quadratic_config_is_flagged_exact() {
    let r = run_convergence(&config("quadratic_exact.json")).unwrap();
    assert!(r.exact);
    assert!(r.slope.is_none());
    for row in &r.rows {
        assert!(row.error_sup.unwrap() <= EXACT_TOL, "{row:?}");
    }
}

#[test]
fn circle_grid_study_has_first_order_slope() {
    let r = run_convergence(&config("circle_convergence.json")).unwrap();
    assert!(!r.exact);
    let s = r.slope.unwrap();
    assert!((-1.1..=-0.9).contains(&s), "slope {s}");
}

#[test]
fn fd_oracle_tracks_variable_coefficients() {
    let mut cfg = config("circle_convergence.json");
    cfg.generator.fields = vec!["custom:1+0.3*sin(x)".into()];
    cfg.oracle = Some(OracleConfig::Fd { steps: 400 });
    let r = run_convergence(&cfg).unwrap();
    let errs: Vec<f64> = r.rows.iter().map(|row| row.error_sup.unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(r.slope.unwrap() < -0.8, "slope {:?}", r.slope);
}

#[test]
fn missing_oracle_is_reported() {
    let mut cfg = config("quadratic_exact.json");
    cfg.oracle = None;
    assert!(matches!(run_convergence(&cfg), Err(Error::InvalidArgument(_))));
    // values need no oracle
    assert_eq!(run_values(&cfg).unwrap().len(), 4 * 3);
}

#[test]
fn schedule_must_be_increasing() {
    let mut cfg = config("quadratic_exact.json");
    cfg.n_schedule = vec![4, 2];
    assert!(cfg.validate().is_err());
}

#[test]
fn zero_field_walk_matches_point_mass() {
    let s = run_walk_study(&config("zero_field_walk.json")).unwrap();
    assert_eq!(s.rows.len(), 2);
    for row in &s.rows {
        assert_eq!(row.ks_distance, Some(0.0));
        assert_eq!(row.mean_f, 0.25);
    }
}

#[test]
fn line_walk_ks_is_non_increasing_within_noise() {
    let s = run_walk_study(&config("line_walk_study.json")).unwrap();
    let ks: Vec<f64> = s.rows.iter().map(|r| r.ks_distance.unwrap()).collect();
    let band = 3.0 * (0.5 / s.rows[0].n_samples as f64).sqrt();
    assert!(ks.windows(2).all(|w| w[1] <= w[0] + band), "{ks:?} band {band}");
    let tail = s.rows.last().unwrap().moc_tail.as_ref().unwrap();
    assert!(tail.iter().all(|&(_, _, p)| (0.0..=1.0).contains(&p)));
}

#[test]
fn interpolated_paths_share_the_jump_skeleton() {
    let x = ManifoldId::Circle.point(&[1.0]).unwrap();
    let spec = setups::circle_variable().unwrap();
    for kind in [PathKind::GeodesicInterp, PathKind::FlowInterp] {
        assert_eq!(skeleton_audit(&spec, kind, &x, 1.0, 16, 50, 11).unwrap(), 0, "{kind:?}");
    }
    let line = setups::line_heat().unwrap();
    let o = ManifoldId::Euclidean(1).default_point();
    assert_eq!(skeleton_audit(&line, PathKind::GeodesicInterp, &o, 0.7, 10, 50, 5).unwrap(), 0);
}

#[test]
fn csv_headers_record_seed_and_config() {
    let cfg = config("quadratic_exact.json");
    let mut buf = Vec::new();
    write_values_csv(&mut buf, &cfg, &run_values(&cfg).unwrap()).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let head = lines.next().unwrap();
    assert!(head.starts_with("# schema=1 seed=0 config={"));
    let json = head.split_once("config=").unwrap().1;
    assert_eq!(ExperimentConfig::from_json(json).unwrap(), cfg);
    assert_eq!(lines.next().unwrap(), "variant,strategy,t,n,point_or_node,value,stderr");
    assert!(lines.next().unwrap().starts_with("general,tree,0.75,1,-1.5,"));

    let mut buf = Vec::new();
    write_convergence_csv(&mut buf, &run_convergence(&cfg).unwrap()).unwrap();
    assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("n,error_sup"));
}

#[test]
fn mc_strategy_reports_stderr_and_is_reproducible() {
    let mut cfg = config("quadratic_exact.json");
    cfg.strategy = feller_cli::config::Strategy::Mc;
    cfg.samples = Some(20_000);
    cfg.seed = 3;
    let a = run_values(&cfg).unwrap();
    let b = run_values(&cfg).unwrap();
    assert_eq!(a.iter().map(|r| r.value).collect::<Vec<_>>(), b.iter().map(|r| r.value).collect::<Vec<_>>());
    let x = [-1.5, 0.0, 2.0];
    for (i, r) in a.iter().enumerate() {
        let want = x[i % 3] * x[i % 3] + 0.75;
        let se = r.stderr.unwrap();
        assert!(se > 0.0);
        assert!((r.value - want).abs() <= 5.0 * se, "{r:?} vs {want}");
    }
}

#[test]
fn chernoff_filter_selects_chernoff_criteria() {
    let f = vec!["chernoff".to_string()];
    let ids: Vec<u32> = feller_cli::validation::criteria().iter().filter(|c| c.matches(&f)).map(|c| c.id as u32).collect();
    assert_eq!(ids, vec![1, 2, 3, 4, 5, 6, 7, 8, 12]);
    let all = feller_cli::validation::criteria();
    assert_eq!(all.len(), 12);
    assert!(all.iter().all(|c| c.matches(&[])));
}
