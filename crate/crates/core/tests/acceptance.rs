//! Acceptance checks on Iris (N=150, D=4, K=30, α₀=8). Prints one PASS/FAIL
//! line per criterion and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dp_sensitivity::app::report::{emit_report, MANIFEST_FILE, RESULTS_FILE};
use dp_sensitivity::app::sweep::{check_derivatives, mean_abs_error, prepare, run_alpha_sweep, run_functional_sweep, Prepared};
use dp_sensitivity::app::ExperimentConfig;
use dp_sensitivity::diff::{cross_derivative, Real, ScalarField};
use dp_sensitivity::model::StickPriorSpec;
use dp_sensitivity::optimize::{initialize, optimize, OptimizeOptions};
use dp_sensitivity::perturbation::PhiSpec;
use dp_sensitivity::quantities::{
    clusters_predictive, clusters_predictive_simulated, distinct_clusters_closed, g_of_eta,
    thresholded_clusters_closed, ClusterCountQuery, CountMode,
};
use dp_sensitivity::sensitivity::{
    alpha_direction, build_pack, coordinate_rel_err, extrapolate, DirectionKind,
    LinearResponse, PerturbationDirection,
};
use dp_sensitivity::variational::{optimal_responsibilities, GlobalParams, ModelSpec};

const FD_TOL: f64 = 1e-5;
const FD_COLUMNS: usize = 20;
const FD_SECONDS: f64 = 300.0;
const GRAD_TOL: f64 = 1e-6;
const LR_STEP: f64 = 0.1;
const LR_REL: f64 = 0.01;
const LR_FLOOR: f64 = 1e-3;
const QUAD_TOL: f64 = 1e-10;
const N_SIGMA: f64 = 3.0;
const SWAP_TOL: f64 = 1e-6;
const SWEEP_SECONDS: f64 = 1800.0;
const COST_RATIO: f64 = 0.05;
/// Refits compared against derivatives or against each other are solved
/// well past the default tolerance so that solver error does not dominate.
const TIGHT_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&["k=30", "alpha0=8", "seed=0"]).unwrap();
    cfg
}

fn tight(cfg: &ExperimentConfig) -> OptimizeOptions {
    OptimizeOptions {
        grad_tol: TIGHT_TOL,
        ..cfg.optimize_options()
    }
}

fn criterion_1(cfg: &ExperimentConfig, prep: &Prepared) -> Outcome {
    let start = Instant::now();
    let r = check_derivatives(cfg, &prep.data, FD_COLUMNS, 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.max_rel_err() <= FD_TOL && r.hessian_columns_checked == FD_COLUMNS && secs < FD_SECONDS,
        format!(
            "gradient {:.2e}, {} Hessian columns {:.2e}, cross {:.2e}, {secs:.1}s",
            r.gradient_rel_err, r.hessian_columns_checked, r.hessian_rel_err, r.cross_rel_err
        ),
    )
}

fn criterion_2(prep: &Prepared) -> Outcome {
    let fit = &prep.anchor;
    let chol = build_pack(fit, &prep.data, &prep.model).is_ok();
    outcome(
        fit.converged && fit.grad_norm <= GRAD_TOL && chol,
        format!(
            "‖∇KL‖∞ = {:.2e}, min eigenvalue {:.3e}, Cholesky {}",
            fit.grad_norm,
            fit.hessian_min_eig,
            if chol { "ok" } else { "failed" }
        ),
    )
}

fn criterion_3(cfg: &ExperimentConfig, prep: &Prepared) -> Outcome {
    let pack = build_pack(&prep.anchor, &prep.data, &prep.model).unwrap();
    let dir = alpha_direction(&pack, &prep.data, &prep.model).unwrap();
    let base = prep.anchor.eta_opt.flatten();
    let lin = extrapolate(&pack, &dir, LR_STEP).flatten();
    let lin_deriv: Vec<f64> = lin.iter().zip(&base).map(|(l, b)| (l - b) / LR_STEP).collect();

    let opts = tight(cfg);
    let refit = |a: f64| {
        let f = optimize(&prep.anchor.eta_opt, &prep.data, &prep.model, &StickPriorSpec::beta(a), &opts).unwrap();
        (f.eta_opt.flatten(), f.converged)
    };
    let (up, c_up) = refit(cfg.alpha0 + LR_STEP);
    let (down, c_down) = refit(cfg.alpha0 - LR_STEP);
    let fd: Vec<f64> = up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * LR_STEP)).collect();
    let err = coordinate_rel_err(&lin_deriv, &fd, LR_FLOOR);
    let checked = fd.iter().filter(|v| v.abs() > LR_FLOOR).count();
    outcome(
        c_up && c_down && err <= LR_REL,
        format!("max relative difference {err:.2e} over {checked} coordinates above {LR_FLOOR:e}"),
    )
}

/// ½(η − aε)ᵀA(η − aε).
struct ShiftedQuadratic {
    a: DMatrix<f64>,
    shift: Vec<f64>,
}

impl ScalarField for ShiftedQuadratic {
    fn n_params(&self) -> usize {
        self.shift.len()
    }
    fn n_eps(&self) -> usize {
        1
    }
    fn eval<T: Real>(&self, x: &[T], eps: &[T]) -> T {
        let n = self.shift.len();
        let r: Vec<T> = (0..n).map(|i| x[i] - eps[0] * self.shift[i]).collect();
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                s += r[i] * r[j] * (0.5 * self.a[(i, j)]);
            }
        }
        s
    }
}

fn criterion_4() -> Outcome {
    let n = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = ShiftedQuadratic {
        a: &m * m.transpose() + DMatrix::identity(n, n) * 0.5,
        shift: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    };
    let x0 = vec![0.0; n];
    let lr = LinearResponse::from_field(&q, &x0, &[0.0]).unwrap();
    let col: Vec<f64> = cross_derivative(&q, &x0, &[0.0]).unwrap().column(0).iter().copied().collect();
    let dir = PerturbationDirection::from_column(&lr, "quadratic", DirectionKind::AlphaShift, None, col).unwrap();
    let mut worst: f64 = 0.0;
    for eps in [-1.0, 0.5, 2.0] {
        let x = lr.extrapolate_flat(&[(&dir.response, eps)]);
        for (xi, ai) in x.iter().zip(&q.shift) {
            worst = worst.max((xi - ai * eps).abs());
        }
    }
    outcome(worst <= QUAD_TOL, format!("max |η_lin − aε| = {worst:.2e} for ε ∈ {{-1, 0.5, 2}}"))
}

fn criterion_5(prep: &Prepared) -> Outcome {
    let init = initialize(&prep.data, &prep.model, 0).unwrap().flatten();
    let layout = prep.anchor.eta_opt.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_z: f64 = 0.0;
    for trial in 0..20 {
        let x: Vec<f64> = init.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let eta = GlobalParams::unflatten(layout, &x).unwrap();
        let r = optimal_responsibilities(&eta, &prep.data, &prep.model).unwrap();
        let exact = distinct_clusters_closed(&r);
        let q = ClusterCountQuery::in_sample(0).with_mc(1000, trial);
        let mc = g_of_eta(&eta, &prep.data, &prep.model, &q).unwrap();
        let z = if mc.mc_stderr > 0.0 {
            (mc.value - exact).abs() / mc.mc_stderr
        } else if (mc.value - exact).abs() < 1e-9 {
            0.0
        } else {
            f64::INFINITY
        };
        worst_z = worst_z.max(z);
    }
    outcome(worst_z <= N_SIGMA, format!("largest |MC − exact| / stderr over 20 draws of η: {worst_z:.2}"))
}

fn criterion_6(cfg: &ExperimentConfig, prep: &Prepared) -> Outcome {
    let alpha1 = cfg.alpha0 + 1.0;
    let opts = tight(cfg);
    let swap = StickPriorSpec::perturbed(cfg.alpha0, PhiSpec::prior_swap(cfg.alpha0, alpha1), 1.0);
    let a = optimize(&prep.anchor.eta_opt, &prep.data, &prep.model, &swap, &opts).unwrap();
    let b = optimize(&prep.anchor.eta_opt, &prep.data, &prep.model, &StickPriorSpec::beta(alpha1), &opts).unwrap();
    let diff = a
        .eta_opt
        .flatten()
        .iter()
        .zip(b.eta_opt.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let mut worst_z: f64 = 0.0;
    for q in cfg.queries(prep.data.n()) {
        let ga = g_of_eta(&a.eta_opt, &prep.data, &prep.model, &q).unwrap();
        let gb = g_of_eta(&b.eta_opt, &prep.data, &prep.model, &q).unwrap();
        let se = ga.mc_stderr.hypot(gb.mc_stderr);
        let z = if se > 0.0 { (ga.value - gb.value).abs() / se } else { 0.0 };
        worst_z = worst_z.max(z);
    }
    outcome(
        a.converged && b.converged && diff <= SWAP_TOL && worst_z <= N_SIGMA,
        format!("max |Δη| = {diff:.2e}, largest |Δg| / stderr {worst_z:.2}"),
    )
}

fn criterion_7(cfg: &ExperimentConfig, prep: &Prepared) -> (Outcome, Outcome) {
    let mut cfg = cfg.clone();
    cfg.apply_overrides(&["modes=in_sample", "thresholds=0", "count_method=closed_form"]).unwrap();
    let start = Instant::now();
    let report = run_alpha_sweep(&cfg, prep).unwrap();
    let secs = start.elapsed().as_secs_f64() + prep.anchor_seconds;
    let mae = mean_abs_error(&report.rows, 0, CountMode::InSample);
    let best = mae
        .iter()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(k, _)| k.clone())
        .unwrap();
    let listing: Vec<String> = ["alpha0=3", "alpha0=8", "alpha0=13"]
        .iter()
        .map(|k| format!("{k} {:.3}", mae[*k]))
        .collect();
    let seven = outcome(
        best == "alpha0=13" && report.all_converged && secs < SWEEP_SECONDS,
        format!("MAE {}; sweep {secs:.0}s", listing.join(", ")),
    );
    let ratio = report.linear_seconds() / report.refit_seconds();
    let cost = outcome(
        ratio < COST_RATIO,
        format!(
            "linear {:.2}s / refit {:.1}s = {:.1}%",
            report.linear_seconds(),
            report.refit_seconds(),
            100.0 * ratio
        ),
    );
    (seven, cost)
}

fn criterion_8(cfg: &ExperimentConfig, prep: &Prepared) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.apply_overrides(&["modes=in_sample", "thresholds=0", "count_method=closed_form"]).unwrap();
    let tilts: Vec<PhiSpec> = cfg.phis().into_iter().filter(|p| matches!(p, PhiSpec::ExpTilt { .. })).collect();
    cfg.phi = dp_sensitivity::app::PhiChoice::List(tilts.clone());
    let report = run_functional_sweep(&cfg, prep).unwrap();
    let mut pass = report.all_converged && !tilts.is_empty();
    let mut notes = Vec::new();
    for phi in &tilts {
        let label = phi.label();
        let rows: Vec<_> = report.rows.iter().filter(|r| r.group == label).collect();
        let g0 = rows.iter().find(|r| r.param == 0.0).map(|r| r.refit).unwrap();
        let sign_ok = rows
            .iter()
            .filter(|r| r.param > 0.0 && r.param <= 0.5)
            .all(|r| (r.linear - g0).signum() == (r.refit - g0).signum());
        let errs: Vec<f64> = rows.iter().map(|r| (r.linear - r.refit).abs()).collect();
        let mono = errs.windows(2).all(|w| w[1] >= w[0]);
        pass &= sign_ok && mono;
        notes.push(format!(
            "{label}: direction {}, error {} (δ=1 error {:.3})",
            if sign_ok { "agrees" } else { "DISAGREES" },
            if mono { "nondecreasing" } else { "NOT monotone" },
            errs.last().unwrap()
        ));
    }
    outcome(pass, notes.join("; "))
}

fn criterion_9(prep: &Prepared) -> Outcome {
    let model = ModelSpec::new(4, 2.0, prep.model.niw.clone(), prep.model.quadrature().nodes.len()).unwrap();
    let init = initialize(&prep.data, &model, 0).unwrap();
    let fit = optimize(&init, &prep.data, &model, &StickPriorSpec::beta(2.0), &OptimizeOptions::default()).unwrap();
    let mut worst_z: f64 = 0.0;
    for t in [0, 3] {
        let q = ClusterCountQuery::predictive(t, 10).with_mc(4000, 9);
        let a = clusters_predictive(&fit.eta_opt, &q).unwrap();
        let b = clusters_predictive_simulated(&fit.eta_opt, &q).unwrap();
        worst_z = worst_z.max((a.value - b.value).abs() / a.mc_stderr.hypot(b.mc_stderr));
    }
    let mut monotone = true;
    for eta in [&fit.eta_opt, &prep.anchor.eta_opt] {
        let m = if eta.layout.k == 4 { &model } else { &prep.model };
        let r = optimal_responsibilities(eta, &prep.data, m).unwrap();
        let counts: Vec<f64> = (0..=prep.data.n()).map(|t| thresholded_clusters_closed(&r, t)).collect();
        monotone &= counts.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }
    outcome(
        worst_z <= N_SIGMA && monotone,
        format!(
            "binomial vs simulated at K=4, n_new=10: largest |Δ| / stderr {worst_z:.2}; threshold count {}",
            if monotone { "nonincreasing" } else { "INCREASES" }
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timings.csv" {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for run in 0..2 {
        let mut files = BTreeMap::new();
        for sweep in ["alpha", "phi"] {
            let mut cfg = base_config();
            let out = tmp.path().join(format!("{sweep}{run}"));
            cfg.apply_overrides(&[
                "alpha_grid=6,7.5,9".to_string(),
                "alpha0_centers=8,9".into(),
                "delta_grid=0,0.5,1".into(),
                "phi=exp_tilt(c=2)".into(),
                format!("output_dir={}", out.display()),
            ])
            .unwrap();
            let prep = prepare(&cfg).unwrap();
            let report = if sweep == "alpha" {
                run_alpha_sweep(&cfg, &prep).unwrap()
            } else {
                run_functional_sweep(&cfg, &prep).unwrap()
            };
            emit_report(&report, &cfg.output_dir).unwrap();
            for (k, v) in read_dir_bytes(&cfg.output_dir) {
                files.insert(format!("{sweep}/{k}"), v);
            }
        }
        runs.push(files);
    }
    let same = runs[0] == runs[1];
    let has = |k: &str| runs[0].contains_key(k);
    outcome(
        same && has(&format!("alpha/{RESULTS_FILE}")) && has(&format!("phi/{MANIFEST_FILE}")),
        format!("{} report files compared across two runs", runs[0].len()),
    )
}

fn main() {
    let total = Instant::now();
    let cfg = base_config();
    let prep = prepare(&cfg).expect("anchor fit");
    assert_eq!((prep.data.n(), prep.data.dim()), (150, 4));

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "derivative correctness", criterion_1(&cfg, &prep)));
    results.push((2, "second-order optimum", criterion_2(&prep)));
    results.push((3, "linear-response consistency", criterion_3(&cfg, &prep)));
    results.push((4, "quadratic exactness", criterion_4()));
    results.push((5, "Monte Carlo vs closed form", criterion_5(&prep)));
    results.push((6, "prior-swap coherence", criterion_6(&cfg, &prep)));
    let (seven, cost) = criterion_7(&cfg, &prep);
    results.push((7, "alpha extrapolation ordering", seven));
    results.push((8, "functional perturbation direction", criterion_8(&cfg, &prep)));
    results.push((9, "predictive and threshold formulas", criterion_9(&prep)));
    let det = criterion_10_determinism();
    let pass10 = det.pass && cost.pass;
    results.push((
        10,
        "determinism and cost",
        outcome(pass10, format!("{}; {}", det.detail, cost.detail)),
    ));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed, results.len(), total.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
