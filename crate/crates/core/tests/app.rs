use std::path::Path;

use dp_sensitivity::app::report::{emit_report, load_report, parse_results, MANIFEST_FILE, PLOT_DIR, RESULTS_FILE};
use dp_sensitivity::app::sweep::{prepare, run_alpha_sweep, run_functional_sweep, Prepared};
use dp_sensitivity::app::{load_csv, ExperimentConfig, BUNDLED_IRIS};
use dp_sensitivity::Error;

fn small(extra: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&["k=6", "alpha0=4", "alpha_grid=3,4,5", "alpha0_centers=4", "delta_grid=0,0.5,1", "n_mc=300"])
        .unwrap();
    cfg.apply_overrides(extra).unwrap();
    cfg
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn csv_loading() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mixed.csv");
    std::fs::write(&p, "x,name\n1.5,a\n2.5,b\n-1,c\n").unwrap();
    let d = load_csv(&p, false).unwrap();
    assert_eq!((d.n(), d.dim()), (3, 1));

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert!(matches!(load_csv(&empty, false), Err(Error::Load { .. })));
    assert!(matches!(load_csv(dir.path().join("missing.csv"), false), Err(Error::Io { .. })));

    let iris = load_csv(BUNDLED_IRIS, false).unwrap();
    assert_eq!((iris.n(), iris.dim()), (150, 4));
}

#[test]
fn alpha_report_round_trips_and_plots_parse() {
    let cfg = small(&[]);
    let prep = prepare(&cfg).unwrap();
    let report = run_alpha_sweep(&cfg, &prep).unwrap();
    assert_eq!(report.rows.len(), 3 * 4);
    assert!(report.all_converged);

    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let back = load_report(dir.path()).unwrap();
    assert_eq!(back.kind, report.kind);
    assert_eq!(back.metadata, report.metadata);
    assert_eq!(back.rows, report.rows);
    assert_eq!(back.all_converged, report.all_converged);
    assert_eq!(back.timings.len(), report.timings.len());

    let text = std::fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
    assert!(text.starts_with("# "));
    let (meta, rows) = parse_results(&text, Path::new(RESULTS_FILE)).unwrap();
    assert_eq!(meta["config_hash"], cfg.hash());
    assert_eq!(rows, report.rows);

    let plots: Vec<_> = std::fs::read_dir(dir.path().join(PLOT_DIR)).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(plots.len(), 4);
    for p in plots {
        let svg = std::fs::read_to_string(&p).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
    }

    let m = manifest(dir.path());
    assert_eq!(m["config_hash"], cfg.hash());
    assert_eq!(m["files"].as_object().unwrap().len(), 5);
}

#[test]
fn zero_perturbation_columns_coincide() {
    let cfg = small(&["alpha_grid=4", "delta_grid=0", "phi=exp_tilt(c=2);beta_swap(a=2,b=3)"]);
    let prep = prepare(&cfg).unwrap();
    for report in [run_alpha_sweep(&cfg, &prep).unwrap(), run_functional_sweep(&cfg, &prep).unwrap()] {
        assert!(!report.rows.is_empty());
        for r in &report.rows {
            assert_eq!(r.epsilon, 0.0);
            assert_eq!(r.refit, r.linear, "{r:?}");
            assert_eq!(r.refit_stderr, r.linear_stderr);
        }
    }
}

#[test]
fn manifest_hash_tracks_config() {
    let run = |cfg: &ExperimentConfig, prep: &Prepared| {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&run_alpha_sweep(cfg, prep).unwrap(), dir.path()).unwrap();
        manifest(dir.path())
    };
    let a = small(&["alpha_grid=4.5", "modes=in_sample"]);
    let prep = prepare(&a).unwrap();
    let ma = run(&a, &prep);

    let mut moved = a.clone();
    moved.apply_overrides(&["output_dir=somewhere/else"]).unwrap();
    assert_eq!(run(&moved, &prep), ma);

    let mut b = a.clone();
    b.apply_overrides(&["n_mc=301"]).unwrap();
    let mb = run(&b, &prep);
    assert_ne!(mb["config_hash"], ma["config_hash"]);
    assert_ne!(mb["files"], ma["files"]);
}

#[test]
fn unconverged_refits_are_flagged() {
    let cfg = small(&["alpha_grid=0.5,4", "modes=in_sample", "thresholds=0"]);
    let prep = prepare(&cfg).unwrap();
    let mut starved = cfg.clone();
    starved.apply_overrides(&["max_lbfgs_iter=1", "max_newton_iter=0", "max_restarts=0"]).unwrap();
    let report = run_alpha_sweep(&starved, &prep).unwrap();
    assert!(!report.all_converged);
    let flags: Vec<bool> = report.rows.iter().map(|r| r.refit_converged).collect();
    assert_eq!(flags, vec![false, true]);

    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    assert!(!load_report(dir.path()).unwrap().all_converged);
    assert_eq!(manifest(dir.path())["all_converged"], false);
}

#[test]
fn prior_swap_refit_matches_alpha_refit() {
    let cfg = small(&["alpha_grid=5", "delta_grid=1", "phi=prior_swap(alpha1=5)"]);
    let prep = prepare(&cfg).unwrap();
    let alpha = run_alpha_sweep(&cfg, &prep).unwrap();
    let swap = run_functional_sweep(&cfg, &prep).unwrap();
    assert_eq!(alpha.rows.len(), swap.rows.len());
    for (a, s) in alpha.rows.iter().zip(&swap.rows) {
        assert_eq!((a.threshold, a.mode), (s.threshold, s.mode));
        let se = a.refit_stderr.hypot(s.refit_stderr);
        assert!((a.refit - s.refit).abs() <= 3.0 * se + 1e-9, "{a:?} vs {s:?}");
    }
    assert_eq!(swap.densities.len(), 1);
    assert_eq!(swap.densities[0].delta, 1.0);
}

#[test]
fn unwritable_output_is_an_error() {
    let cfg = small(&["alpha_grid=4", "modes=in_sample", "thresholds=0"]);
    let prep = prepare(&cfg).unwrap();
    let report = run_alpha_sweep(&cfg, &prep).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "").unwrap();
    assert!(matches!(emit_report(&report, &file), Err(Error::Io { .. })));
}
