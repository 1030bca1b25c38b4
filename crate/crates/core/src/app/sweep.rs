//! Refit-versus-linear sweeps over α and over functional perturbations.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::data::load_csv;
use crate::diff::{fd_check_columns, FdReport};
use crate::error::{Error, Result};
use crate::model::{Dataset, StickPriorSpec};
use crate::objective::KlObjective;
use crate::optimize::{initialize, optimize, FitResult};
use crate::perturbation::prior_density_table;
use crate::quantities::{g_of_eta, ClusterCountQuery, CountMethod, CountMode};
use crate::sensitivity::{alpha_direction, build_pack, extrapolate, functional_direction};
use crate::variational::{GlobalParams, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Alpha,
    Phi,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Alpha => "alpha",
            SweepKind::Phi => "phi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alpha" => Some(SweepKind::Alpha),
            "phi" => Some(SweepKind::Phi),
            _ => None,
        }
    }
}

/// One (group, parameter, query) cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sweep: SweepKind,
    /// `alpha0=<center>` for α sweeps, the perturbation label otherwise.
    pub group: String,
    /// Concentration the linearization is taken at.
    pub center: f64,
    /// α for α sweeps, δ for functional sweeps.
    pub param: f64,
    pub epsilon: f64,
    pub threshold: usize,
    pub mode: CountMode,
    pub method: CountMethod,
    pub refit: f64,
    pub refit_stderr: f64,
    pub linear: f64,
    pub linear_stderr: f64,
    pub refit_converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    /// `anchor`, `center`, `pack`, `refit` or `linear`.
    pub stage: String,
    pub label: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityCurve {
    pub label: String,
    pub alpha: f64,
    pub delta: f64,
    /// Rows of `(ν, p₀(ν), p_c(ν))`.
    pub table: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<SweepRow>,
    pub timings: Vec<Timing>,
    pub densities: Vec<DensityCurve>,
    pub all_converged: bool,
}

impl SweepReport {
    fn total(&self, stage: &str) -> f64 {
        self.timings.iter().filter(|t| t.stage == stage).map(|t| t.seconds).sum()
    }

    /// Wall time of all refit columns, including evaluation of `g`.
    pub fn refit_seconds(&self) -> f64 {
        self.total("refit")
    }

    /// Wall time of all linear columns, excluding the one-time factorization.
    pub fn linear_seconds(&self) -> f64 {
        self.total("linear")
    }

    pub fn pack_seconds(&self) -> f64 {
        self.total("pack")
    }
}

/// Data, model and the anchor fit at `alpha0` shared by every sweep.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Dataset,
    pub model: ModelSpec,
    pub anchor: FitResult,
    pub anchor_seconds: f64,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = load_csv(&cfg.data_path, cfg.standardize)?;
    prepare_with_data(cfg, data)
}

pub fn prepare_with_data(cfg: &ExperimentConfig, data: Dataset) -> Result<Prepared> {
    let model = cfg.model(&data)?;
    let start = Instant::now();
    let init = initialize(&data, &model, cfg.seed)?;
    let anchor = optimize(&init, &data, &model, &StickPriorSpec::beta(cfg.alpha0), &cfg.optimize_options())?;
    let anchor_seconds = start.elapsed().as_secs_f64();
    log::info!(
        "anchor fit α={} KL={:.6} ‖g‖∞={:.2e} λmin={:.3e} converged={}",
        cfg.alpha0,
        anchor.kl_value,
        anchor.grad_norm,
        anchor.hessian_min_eig,
        anchor.converged
    );
    Ok(Prepared {
        data,
        model,
        anchor,
        anchor_seconds,
    })
}

impl Prepared {
    /// Fit at `prior`, warm-started from the anchor.
    pub fn refit(&self, cfg: &ExperimentConfig, prior: &StickPriorSpec) -> Result<FitResult> {
        optimize(&self.anchor.eta_opt, &self.data, &self.model, prior, &cfg.optimize_options())
    }

    fn evaluate(&self, eta: &GlobalParams, queries: &[ClusterCountQuery]) -> Result<Vec<(f64, f64)>> {
        queries
            .iter()
            .map(|q| g_of_eta(eta, &self.data, &self.model, q).map(|e| (e.value, e.mc_stderr)))
            .collect()
    }
}

fn metadata(cfg: &ExperimentConfig, prep: &Prepared, kind: SweepKind) -> BTreeMap<String, String> {
    let mut m: BTreeMap<String, String> = cfg
        .to_map()
        .into_iter()
        .filter(|(k, _)| k != "output_dir")
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect();
    m.insert("sweep".into(), kind.as_str().into());
    m.insert("config_hash".into(), cfg.hash());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert("n".into(), prep.data.n().to_string());
    m.insert("d".into(), prep.data.dim().to_string());
    m.insert("anchor_kl".into(), format!("{:.10e}", prep.anchor.kl_value));
    m.insert("anchor_converged".into(), prep.anchor.converged.to_string());
    m
}

struct RefitColumn {
    param: f64,
    values: Vec<(f64, f64)>,
    converged: bool,
    seconds: f64,
}

fn refit_columns(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    params: &[f64],
    prior_at: impl Fn(f64) -> StickPriorSpec + Sync,
    queries: &[ClusterCountQuery],
) -> Result<Vec<RefitColumn>> {
    params
        .par_iter()
        .map(|&p| {
            let start = Instant::now();
            let fit = prep.refit(cfg, &prior_at(p))?;
            let values = prep.evaluate(&fit.eta_opt, queries)?;
            if !fit.converged {
                log::warn!("refit at {p} did not converge (‖g‖∞={:.2e})", fit.grad_norm);
            }
            Ok(RefitColumn {
                param: p,
                values,
                converged: fit.converged,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn push_rows(
    rows: &mut Vec<SweepRow>,
    kind: SweepKind,
    group: &str,
    center: f64,
    col: &RefitColumn,
    epsilon: f64,
    linear: &[(f64, f64)],
    queries: &[ClusterCountQuery],
) {
    for (q, (r, l)) in queries.iter().zip(col.values.iter().zip(linear)) {
        rows.push(SweepRow {
            sweep: kind,
            group: group.to_string(),
            center,
            param: col.param,
            epsilon,
            threshold: q.threshold,
            mode: q.mode,
            method: q.method,
            refit: r.0,
            refit_stderr: r.1,
            linear: l.0,
            linear_stderr: l.1,
            refit_converged: col.converged,
        });
    }
}

fn validated_queries(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<ClusterCountQuery>> {
    let queries = cfg.queries(prep.data.n());
    for q in &queries {
        q.validate()?;
    }
    Ok(queries)
}

/// Refits over `alpha_grid` against linear extrapolation from each center in
/// `alpha0_centers`. Center fits and grid refits are warm-started from the
/// anchor, so every center is compared against the same refits.
pub fn run_alpha_sweep(cfg: &ExperimentConfig, prep: &Prepared) -> Result<SweepReport> {
    let queries = validated_queries(cfg, prep)?;
    let kind = SweepKind::Alpha;
    let mut timings = vec![Timing {
        stage: "anchor".into(),
        label: format!("alpha={}", cfg.alpha0),
        seconds: prep.anchor_seconds,
    }];
    let mut all_converged = prep.anchor.converged;

    let refits = refit_columns(cfg, prep, &cfg.alpha_grid, StickPriorSpec::beta, &queries)?;
    for c in &refits {
        all_converged &= c.converged;
        timings.push(Timing {
            stage: "refit".into(),
            label: format!("alpha={}", c.param),
            seconds: c.seconds,
        });
    }

    let mut rows = Vec::new();
    for &center in &cfg.alpha0_centers {
        let start = Instant::now();
        let fit = if center == cfg.alpha0 {
            prep.anchor.clone()
        } else {
            prep.refit(cfg, &StickPriorSpec::beta(center))?
        };
        timings.push(Timing {
            stage: "center".into(),
            label: format!("alpha0={center}"),
            seconds: start.elapsed().as_secs_f64(),
        });
        all_converged &= fit.converged;
        let start = Instant::now();
        let pack = build_pack(&fit, &prep.data, &prep.model)
            .map_err(|e| Error::SecondOrder(format!("center α₀={center}: {e}")))?;
        let dir = alpha_direction(&pack, &prep.data, &prep.model)?;
        timings.push(Timing {
            stage: "pack".into(),
            label: format!("alpha0={center}"),
            seconds: start.elapsed().as_secs_f64(),
        });
        let group = format!("alpha0={center}");
        for col in &refits {
            let start = Instant::now();
            let eps = col.param - center;
            let lin = extrapolate(&pack, &dir, eps);
            let values = prep.evaluate(&lin, &queries)?;
            timings.push(Timing {
                stage: "linear".into(),
                label: format!("alpha0={center},alpha={}", col.param),
                seconds: start.elapsed().as_secs_f64(),
            });
            push_rows(&mut rows, kind, &group, center, col, eps, &values, &queries);
        }
    }

    Ok(SweepReport {
        kind,
        metadata: metadata(cfg, prep, kind),
        rows,
        timings,
        densities: Vec::new(),
        all_converged,
    })
}

/// Points in each prior density table.
pub const DENSITY_POINTS: usize = 199;

/// For each configured `φ`, refits over `delta_grid` under `p₀ φ^δ` against
/// linear extrapolation from the anchor.
pub fn run_functional_sweep(cfg: &ExperimentConfig, prep: &Prepared) -> Result<SweepReport> {
    let queries = validated_queries(cfg, prep)?;
    let kind = SweepKind::Phi;
    let alpha = cfg.alpha0;
    let mut timings = vec![Timing {
        stage: "anchor".into(),
        label: format!("alpha={alpha}"),
        seconds: prep.anchor_seconds,
    }];
    let mut all_converged = prep.anchor.converged;

    let start = Instant::now();
    let mut pack = build_pack(&prep.anchor, &prep.data, &prep.model)?;
    timings.push(Timing {
        stage: "pack".into(),
        label: "factorize".into(),
        seconds: start.elapsed().as_secs_f64(),
    });

    let mut rows = Vec::new();
    let mut densities = Vec::new();
    let delta_max = cfg.delta_grid.iter().cloned().fold(0.0, f64::max);
    for phi in cfg.phis() {
        let label = phi.label();
        let start = Instant::now();
        let dir = functional_direction(&pack, &phi, &prep.data, &prep.model)?;
        timings.push(Timing {
            stage: "pack".into(),
            label: format!("direction {label}"),
            seconds: start.elapsed().as_secs_f64(),
        });

        let refits = refit_columns(
            cfg,
            prep,
            &cfg.delta_grid,
            |d| StickPriorSpec::perturbed(alpha, phi.clone(), d),
            &queries,
        )?;
        for col in &refits {
            all_converged &= col.converged;
            timings.push(Timing {
                stage: "refit".into(),
                label: format!("{label},delta={}", col.param),
                seconds: col.seconds,
            });
            let start = Instant::now();
            let lin = extrapolate(&pack, &dir, col.param);
            let values = prep.evaluate(&lin, &queries)?;
            timings.push(Timing {
                stage: "linear".into(),
                label: format!("{label},delta={}", col.param),
                seconds: start.elapsed().as_secs_f64(),
            });
            push_rows(&mut rows, kind, &label, alpha, col, col.param, &values, &queries);
        }
        densities.push(DensityCurve {
            label: label.clone(),
            alpha,
            delta: delta_max,
            table: prior_density_table(alpha, &phi, delta_max, DENSITY_POINTS)?,
        });
        pack.register(dir);
    }

    Ok(SweepReport {
        kind,
        metadata: metadata(cfg, prep, kind),
        rows,
        timings,
        densities,
        all_converged,
    })
}

/// Mean absolute linear-minus-refit error per group, for one query.
pub fn mean_abs_error(rows: &[SweepRow], threshold: usize, mode: CountMode) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.threshold == threshold && r.mode == mode) {
        let e = acc.entry(r.group.clone()).or_default();
        e.0 += (r.linear - r.refit).abs();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Finite-difference check of the gradient, `columns` random Hessian columns
/// and the cross columns, at the k-means initialization for `cfg`. The
/// initialization is used rather than the optimum so that the gradient is not
/// vanishingly small.
pub fn check_derivatives(cfg: &ExperimentConfig, data: &Dataset, columns: usize, step: f64) -> Result<FdReport> {
    let model = cfg.model(data)?;
    let x = initialize(data, &model, cfg.seed)?.flatten();
    let obj = KlObjective::new(data, &model, StickPriorSpec::beta(cfg.alpha0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cols = rand::seq::index::sample(&mut rng, x.len(), columns.min(x.len())).into_vec();
    cols.sort_unstable();
    fd_check_columns(&obj, &x, &[0.0, 0.0], step, &cols)
}
