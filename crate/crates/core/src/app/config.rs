//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated, and a
//! numeric list may also be written as a range `start:stop:step`. Perturbations
//! are `name(key=value, ...)` separated by `;`, or `builtin`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Dataset, NiwPriorSpec};
use crate::optimize::OptimizeOptions;
use crate::perturbation::{builtin_phis, PhiSpec, PhiTable};
use crate::quantities::{ClusterCountQuery, CountMethod, CountMode};
use crate::variational::ModelSpec;

/// Path of the bundled Iris fixture.
pub const BUNDLED_IRIS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/iris.csv");

#[derive(Clone, Debug, PartialEq)]
pub enum PhiChoice {
    Builtin,
    List(Vec<PhiSpec>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_path: PathBuf,
    pub standardize: bool,
    pub k: usize,
    pub alpha0: f64,
    pub alpha_grid: Vec<f64>,
    pub alpha0_centers: Vec<f64>,
    pub phi: PhiChoice,
    pub delta_grid: Vec<f64>,
    pub thresholds: Vec<usize>,
    pub modes: Vec<CountMode>,
    pub count_method: CountMethod,
    /// Size of the hypothetical dataset for predictive counts; 0 means N.
    pub n_new: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub quad_nodes: usize,
    pub grad_tol: f64,
    pub max_lbfgs_iter: usize,
    pub max_newton_iter: usize,
    pub max_restarts: usize,
    pub cov_floor: f64,
    pub niw_mean_scale: f64,
    /// Inverse-Wishart degrees of freedom; `None` means D + 3.
    pub niw_dof: Option<f64>,
    /// Multiplier on the data covariance for the scale matrix; `None` means
    /// dof + D + 2, placing the prior mode of Σ at the data covariance.
    pub niw_scale: Option<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_path: PathBuf::from(BUNDLED_IRIS),
            standardize: false,
            k: ModelSpec::DEFAULT_K,
            alpha0: 8.0,
            alpha_grid: range(0.5, 15.0, 0.5),
            alpha0_centers: vec![3.0, 8.0, 13.0],
            phi: PhiChoice::Builtin,
            delta_grid: range(0.0, 1.0, 0.1),
            thresholds: vec![0, 3],
            modes: vec![CountMode::InSample, CountMode::Predictive],
            count_method: CountMethod::MonteCarlo,
            n_new: 0,
            n_mc: ClusterCountQuery::DEFAULT_N_MC,
            seed: 0,
            quad_nodes: ModelSpec::DEFAULT_QUAD_NODES,
            grad_tol: 1e-6,
            max_lbfgs_iter: OptimizeOptions::default().max_lbfgs_iter,
            max_newton_iter: OptimizeOptions::default().max_newton_iter,
            max_restarts: 3,
            cov_floor: ModelSpec::DEFAULT_COV_FLOOR,
            niw_mean_scale: 0.1,
            niw_dof: None,
            niw_scale: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn range(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a nonnegative integer")))
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = v.split(':').collect();
    if parts.len() == 3 {
        let (a, b, s) = (parse_f64(key, parts[0])?, parse_f64(key, parts[1])?, parse_f64(key, parts[2])?);
        if !(s > 0.0) || b < a {
            return Err(Error::Config(format!("{key}: bad range `{v}`")));
        }
        return Ok(range(a, b, s));
    }
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_f64(key, s))
        .collect()
}

fn parse_auto(key: &str, v: &str) -> Result<Option<f64>> {
    if v.trim() == "auto" {
        Ok(None)
    } else {
        parse_f64(key, v).map(Some)
    }
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `name(k=v, ...)`.
pub fn parse_phi(text: &str, alpha0: f64) -> Result<PhiSpec> {
    let text = text.trim();
    let (name, args) = match text.find('(') {
        Some(i) if text.ends_with(')') => (&text[..i], &text[i + 1..text.len() - 1]),
        None => (text, ""),
        _ => return Err(Error::Config(format!("phi: cannot parse `{text}`"))),
    };
    let mut kv = BTreeMap::new();
    for part in args.split(',').filter(|s| !s.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("phi: expected key=value in `{part}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |k: &str, default: Option<f64>| -> Result<f64> {
        match kv.get(k) {
            Some(v) => parse_f64(&format!("phi.{k}"), v),
            None => default.ok_or_else(|| Error::Config(format!("phi `{name}` needs `{k}`"))),
        }
    };
    let phi = match name.trim() {
        "prior_swap" => PhiSpec::prior_swap(num("alpha0", Some(alpha0))?, num("alpha1", None)?),
        "exp_tilt" => PhiSpec::exp_tilt(num("c", None)?),
        "beta_swap" => PhiSpec::beta_swap(num("a", None)?, num("b", None)?, num("alpha0", Some(alpha0))?),
        "polynomial" => {
            let mut coeffs = Vec::new();
            while let Some(v) = kv.get(&format!("c{}", coeffs.len())) {
                coeffs.push(parse_f64("phi", v)?);
            }
            PhiSpec::polynomial(coeffs)
        }
        "tabulated" => {
            let path = kv
                .get("path")
                .ok_or_else(|| Error::Config("phi `tabulated` needs `path`".into()))?;
            PhiSpec::Tabulated(PhiTable::load(path)?)
        }
        other => return Err(Error::Config(format!("unknown perturbation `{other}`"))),
    };
    phi.validate()?;
    Ok(phi)
}

fn phi_to_string(phi: &PhiSpec) -> String {
    match phi {
        PhiSpec::Tabulated(t) => match t.source() {
            Some(p) => format!("tabulated(path={})", p.display()),
            None => format!("tabulated(knots={})", t.knots().0.len()),
        },
        other => other.label(),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Load {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data" => self.data_path = PathBuf::from(v),
            "standardize" => {
                self.standardize = v
                    .parse()
                    .map_err(|_| Error::Config(format!("standardize: `{v}` is not true/false")))?
            }
            "k" => self.k = parse_usize(key, v)?,
            "alpha0" => self.alpha0 = parse_f64(key, v)?,
            "alpha_grid" => self.alpha_grid = parse_f64_list(key, v)?,
            "alpha0_centers" => self.alpha0_centers = parse_f64_list(key, v)?,
            "phi" => {
                self.phi = if v == "builtin" {
                    PhiChoice::Builtin
                } else {
                    PhiChoice::List(
                        v.split(';')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| parse_phi(s, self.alpha0))
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "delta_grid" => self.delta_grid = parse_f64_list(key, v)?,
            "thresholds" => {
                self.thresholds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_usize(key, s))
                    .collect::<Result<_>>()?
            }
            "modes" => {
                self.modes = v
                    .split(',')
                    .map(|s| CountMode::parse(s.trim()).ok_or_else(|| Error::Config(format!("modes: unknown `{s}`"))))
                    .collect::<Result<_>>()?
            }
            "count_method" => {
                self.count_method =
                    CountMethod::parse(v).ok_or_else(|| Error::Config(format!("count_method: unknown `{v}`")))?
            }
            "n_new" => self.n_new = parse_usize(key, v)?,
            "n_mc" => self.n_mc = parse_usize(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| Error::Config(format!("seed: `{v}`")))?,
            "quad_nodes" => self.quad_nodes = parse_usize(key, v)?,
            "grad_tol" => self.grad_tol = parse_f64(key, v)?,
            "max_lbfgs_iter" => self.max_lbfgs_iter = parse_usize(key, v)?,
            "max_newton_iter" => self.max_newton_iter = parse_usize(key, v)?,
            "max_restarts" => self.max_restarts = parse_usize(key, v)?,
            "cov_floor" => self.cov_floor = parse_f64(key, v)?,
            "niw_mean_scale" => self.niw_mean_scale = parse_f64(key, v)?,
            "niw_dof" => self.niw_dof = parse_auto(key, v)?,
            "niw_scale" => self.niw_scale = parse_auto(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.alpha0 > 0.0) {
            return bad("alpha0 must be positive");
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(*a > 0.0)) {
            return bad("alpha_grid must be a nonempty list of positive numbers");
        }
        if self.alpha0_centers.is_empty() || self.alpha0_centers.iter().any(|a| !(*a > 0.0)) {
            return bad("alpha0_centers must be a nonempty list of positive numbers");
        }
        if self.delta_grid.is_empty() || self.delta_grid.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("delta_grid must be a nonempty list in [0, 1]");
        }
        if self.thresholds.is_empty() || self.modes.is_empty() {
            return bad("thresholds and modes must be nonempty");
        }
        if self.n_mc == 0 || self.quad_nodes < 2 {
            return bad("n_mc must be positive and quad_nodes at least 2");
        }
        if !(self.grad_tol > 0.0) || !(self.cov_floor > 0.0) || !(self.niw_mean_scale > 0.0) {
            return bad("tolerances and prior scales must be positive");
        }
        if let PhiChoice::List(l) = &self.phi {
            if l.is_empty() {
                return bad("phi list is empty");
            }
        }
        Ok(())
    }

    /// Every setting as `key → value`, in the syntax accepted by [`set`](Self::set).
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let auto = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let phi = match &self.phi {
            PhiChoice::Builtin => "builtin".to_string(),
            PhiChoice::List(l) => l.iter().map(phi_to_string).collect::<Vec<_>>().join(";"),
        };
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("data", self.data_path.display().to_string());
        put("standardize", self.standardize.to_string());
        put("k", self.k.to_string());
        put("alpha0", self.alpha0.to_string());
        put("alpha_grid", fmt_list(&self.alpha_grid));
        put("alpha0_centers", fmt_list(&self.alpha0_centers));
        put("phi", phi);
        put("delta_grid", fmt_list(&self.delta_grid));
        put("thresholds", fmt_list(&self.thresholds));
        put("modes", self.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        put("count_method", self.count_method.as_str().to_string());
        put("n_new", self.n_new.to_string());
        put("n_mc", self.n_mc.to_string());
        put("seed", self.seed.to_string());
        put("quad_nodes", self.quad_nodes.to_string());
        put("grad_tol", self.grad_tol.to_string());
        put("max_lbfgs_iter", self.max_lbfgs_iter.to_string());
        put("max_newton_iter", self.max_newton_iter.to_string());
        put("max_restarts", self.max_restarts.to_string());
        put("cov_floor", self.cov_floor.to_string());
        put("niw_mean_scale", self.niw_mean_scale.to_string());
        put("niw_dof", auto(self.niw_dof));
        put("niw_scale", auto(self.niw_scale));
        put("output_dir", self.output_dir.display().to_string());
        m
    }

    /// The configuration file text; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical settings, excluding the output directory.
    /// Tabulated perturbations contribute their knots as well as their path.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_map() {
            if k != "output_dir" {
                h.update(format!("{k}={v}\n"));
            }
        }
        if let PhiChoice::List(l) = &self.phi {
            for phi in l {
                if let PhiSpec::Tabulated(t) = phi {
                    let (nu, lp) = t.knots();
                    h.update(format!("table={nu:?};{lp:?}\n"));
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn phis(&self) -> Vec<PhiSpec> {
        match &self.phi {
            PhiChoice::Builtin => builtin_phis(self.alpha0),
            PhiChoice::List(l) => l.clone(),
        }
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        OptimizeOptions {
            grad_tol: self.grad_tol,
            max_lbfgs_iter: self.max_lbfgs_iter,
            max_newton_iter: self.max_newton_iter,
            max_restarts: self.max_restarts,
            seed: self.seed,
            ..OptimizeOptions::default()
        }
    }

    pub fn niw(&self, data: &Dataset) -> NiwPriorSpec {
        let d = data.dim() as f64;
        let dof = self.niw_dof.unwrap_or(d + 3.0);
        let scale = self.niw_scale.unwrap_or(dof + d + 2.0);
        NiwPriorSpec {
            prior_mean: data.mean(),
            mean_scale: self.niw_mean_scale,
            dof,
            scale_matrix: data.covariance() * scale,
        }
    }

    pub fn model(&self, data: &Dataset) -> Result<ModelSpec> {
        Ok(ModelSpec::new(self.k, self.alpha0, self.niw(data), self.quad_nodes)?.with_cov_floor(self.cov_floor))
    }

    /// One query per (threshold, mode) in config order.
    pub fn queries(&self, n_data: usize) -> Vec<ClusterCountQuery> {
        let n_new = if self.n_new == 0 { n_data } else { self.n_new };
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &t in &self.thresholds {
                let q = match mode {
                    CountMode::InSample => {
                        let q = ClusterCountQuery::in_sample(t);
                        if self.count_method == CountMethod::ClosedForm {
                            q.closed_form()
                        } else {
                            q
                        }
                    }
                    CountMode::Predictive => ClusterCountQuery::predictive(t, n_new),
                };
                let method = q.method;
                let mut q = q.with_mc(self.n_mc, self.seed);
                q.method = method;
                out.push(q);
            }
        }
        out
    }
}
