//! Multiplicative perturbations `φ` of the stick density and the
//! δ-contaminated prior `p_c(ν) ∝ p₀(ν) φ(ν)^δ`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::diff::Real;
use crate::error::{Error, Result};
use crate::model::StickPoint;
use crate::quadrature;

const NORMALIZER_TOL: f64 = 1e-10;

/// `log φ` on a strictly increasing grid, interpolated with a monotone
/// (Fritsch–Carlson) cubic and held constant beyond the end knots.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiTable {
    nu: Vec<f64>,
    log_phi: Vec<f64>,
    slopes: Vec<f64>,
    source: Option<PathBuf>,
}

impl PhiTable {
    pub fn new(nu: Vec<f64>, log_phi: Vec<f64>) -> Result<Self> {
        if nu.len() != log_phi.len() {
            return Err(Error::Dimension {
                expected: nu.len(),
                got: log_phi.len(),
            });
        }
        if nu.len() < 2 {
            return Err(Error::domain("tabulated φ needs at least two knots"));
        }
        if let Some(i) = nu.iter().position(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::domain(format!("knot {i}: ν = {} outside (0, 1)", nu[i])));
        }
        if let Some(i) = nu.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::domain(format!("knots not strictly increasing at {}", i + 1)));
        }
        if let Some(i) = log_phi.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite log φ at knot {i}")));
        }
        let slopes = fritsch_carlson(&nu, &log_phi);
        Ok(PhiTable {
            nu,
            log_phi,
            slopes,
            source: None,
        })
    }

    /// Two whitespace- or comma-separated columns `ν  log φ`; `#` starts a
    /// comment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut nu = Vec::new();
        let mut lp = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            let err = |msg: String| Error::Load {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if fields.len() != 2 {
                return Err(err(format!("expected 2 columns, found {}", fields.len())));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("not a finite number: {s:?}")))
            };
            nu.push(parse(fields[0])?);
            lp.push(parse(fields[1])?);
        }
        let mut table = PhiTable::new(nu, lp).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        table.source = Some(path.to_path_buf());
        Ok(table)
    }

    /// The file the table was loaded from, if any.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.nu, &self.log_phi)
    }

    fn eval<T: Real>(&self, x: T) -> T {
        let v = x.value();
        let n = self.nu.len();
        if v <= self.nu[0] {
            return T::cst(self.log_phi[0]);
        }
        if v >= self.nu[n - 1] {
            return T::cst(self.log_phi[n - 1]);
        }
        let i = self.nu.partition_point(|&k| k <= v) - 1;
        let h = self.nu[i + 1] - self.nu[i];
        let t = (x - self.nu[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = t3 * 2.0 - t2 * 3.0 + 1.0;
        let h10 = t3 - t2 * 2.0 + t;
        let h01 = t2 * 3.0 - t3 * 2.0;
        let h11 = t3 - t2;
        h00 * self.log_phi[i] + h10 * (h * self.slopes[i]) + h01 * self.log_phi[i + 1]
            + h11 * (h * self.slopes[i + 1])
    }
}

fn fritsch_carlson(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let secants: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
    let mut m = vec![0.0; n];
    m[0] = secants[0];
    m[n - 1] = secants[n - 2];
    for i in 1..n - 1 {
        m[i] = if secants[i - 1] * secants[i] <= 0.0 {
            0.0
        } else {
            (secants[i - 1] + secants[i]) / 2.0
        };
    }
    for i in 0..n - 1 {
        if secants[i] == 0.0 {
            m[i] = 0.0;
            m[i + 1] = 0.0;
            continue;
        }
        let a = m[i] / secants[i];
        let b = m[i + 1] / secants[i];
        let s = a * a + b * b;
        if s > 9.0 {
            let tau = 3.0 / s.sqrt();
            m[i] = tau * a * secants[i];
            m[i + 1] = tau * b * secants[i];
        }
    }
    m
}

/// A multiplicative perturbation, represented by `log φ(ν)`.
#[derive(Clone, Debug, PartialEq)]
pub enum PhiSpec {
    /// `φ = Beta(ν | 1, α₁) / Beta(ν | 1, α₀)`.
    PriorSwap { alpha0: f64, alpha1: f64 },
    /// `log φ = c ν`.
    ExpTilt { c: f64 },
    /// `φ = Beta(ν | a, b) / Beta(ν | 1, α₀)`.
    BetaSwap { a: f64, b: f64, alpha0: f64 },
    /// `log φ = Σ_i coeffs[i] νⁱ`.
    Polynomial(Vec<f64>),
    Tabulated(PhiTable),
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

impl PhiSpec {
    pub fn prior_swap(alpha0: f64, alpha1: f64) -> Self {
        PhiSpec::PriorSwap { alpha0, alpha1 }
    }

    pub fn exp_tilt(c: f64) -> Self {
        PhiSpec::ExpTilt { c }
    }

    pub fn beta_swap(a: f64, b: f64, alpha0: f64) -> Self {
        PhiSpec::BetaSwap { a, b, alpha0 }
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        PhiSpec::Polynomial(coeffs)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhiSpec::PriorSwap { .. } => "prior_swap",
            PhiSpec::ExpTilt { .. } => "exp_tilt",
            PhiSpec::BetaSwap { .. } => "beta_swap",
            PhiSpec::Polynomial(_) => "polynomial",
            PhiSpec::Tabulated(_) => "tabulated",
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match self {
            PhiSpec::PriorSwap { alpha0, alpha1 } => {
                m.insert("alpha0".into(), *alpha0);
                m.insert("alpha1".into(), *alpha1);
            }
            PhiSpec::ExpTilt { c } => {
                m.insert("c".into(), *c);
            }
            PhiSpec::BetaSwap { a, b, alpha0 } => {
                m.insert("a".into(), *a);
                m.insert("b".into(), *b);
                m.insert("alpha0".into(), *alpha0);
            }
            PhiSpec::Polynomial(c) => {
                for (i, v) in c.iter().enumerate() {
                    m.insert(format!("c{i}"), *v);
                }
            }
            PhiSpec::Tabulated(t) => {
                m.insert("knots".into(), t.nu.len() as f64);
            }
        }
        m
    }

    /// Short human-readable label, e.g. `exp_tilt(c=-5)`.
    pub fn label(&self) -> String {
        let params: Vec<String> = self.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.name(), params.join(","))
    }

    pub fn log_phi<T: Real>(&self, p: &StickPoint<T>) -> T {
        match self {
            PhiSpec::PriorSwap { alpha0, alpha1 } => {
                p.ln_one_minus_nu * (alpha1 - alpha0) + (alpha1.ln() - alpha0.ln())
            }
            PhiSpec::ExpTilt { c } => p.nu * *c,
            PhiSpec::BetaSwap { a, b, alpha0 } => {
                p.ln_nu * (a - 1.0) + p.ln_one_minus_nu * (b - alpha0) - ln_beta_fn(*a, *b) - alpha0.ln()
            }
            PhiSpec::Polynomial(coeffs) => {
                let mut acc = T::zero();
                for c in coeffs.iter().rev() {
                    acc = acc * p.nu + *c;
                }
                acc
            }
            PhiSpec::Tabulated(t) => t.eval(p.nu),
        }
    }

    pub fn log_phi_at(&self, nu: f64) -> f64 {
        self.log_phi(&StickPoint::from_nu(nu))
    }

    /// `log φ` must be finite on an interior grid of 10³ points.
    pub fn validate(&self) -> Result<()> {
        for i in 1..=1000 {
            let nu = i as f64 / 1001.0;
            let v = self.log_phi_at(nu);
            if !v.is_finite() {
                return Err(Error::domain(format!("{}: log φ({nu}) = {v}", self.label())));
            }
        }
        Ok(())
    }
}

/// The stock perturbations used by the functional sweeps.
pub fn builtin_phis(alpha0: f64) -> Vec<PhiSpec> {
    vec![
        PhiSpec::prior_swap(alpha0, alpha0 + 1.0),
        PhiSpec::exp_tilt(2.0),
        PhiSpec::exp_tilt(-2.0),
        PhiSpec::beta_swap(2.0, 3.0, alpha0),
    ]
}

fn log_base_density(alpha: f64, ln_one_minus_nu: f64) -> f64 {
    alpha.ln() + (alpha - 1.0) * ln_one_minus_nu
}

/// `log ∫₀¹ Beta(ν | 1, α) φ(ν)^δ dν`.
pub fn log_normalizer(alpha: f64, phi: &PhiSpec, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::domain(format!("delta must lie in [0, 1], got {delta}")));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    let z = quadrature::integrate_unit(
        |nu, c| {
            let p = StickPoint {
                nu,
                one_minus_nu: c,
                ln_nu: nu.ln(),
                ln_one_minus_nu: c.ln(),
            };
            (log_base_density(alpha, p.ln_one_minus_nu) + delta * phi.log_phi(&p)).exp()
        },
        NORMALIZER_TOL,
    )?;
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Quadrature(format!("normalizer {z} is not a positive number")));
    }
    Ok(z.ln())
}

/// Normalized `log p_c(ν | δ, φ) = log p₀ + δ log φ − log Z(δ)`.
pub fn contaminated_log_prior(nu: f64, alpha: f64, phi: &PhiSpec, delta: f64) -> Result<f64> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::domain(format!("ν = {nu} outside (0, 1)")));
    }
    let p = StickPoint::from_nu(nu);
    let log_z = log_normalizer(alpha, phi, delta)?;
    Ok(log_base_density(alpha, p.ln_one_minus_nu) + delta * phi.log_phi(&p) - log_z)
}

/// `(ν, p₀(ν), p_c(ν))` on an interior grid, for plotting the prior change.
pub fn prior_density_table(alpha: f64, phi: &PhiSpec, delta: f64, points: usize) -> Result<Vec<[f64; 3]>> {
    let log_z = log_normalizer(alpha, phi, delta)?;
    Ok((1..=points)
        .map(|i| {
            let nu = i as f64 / (points + 1) as f64;
            let p = StickPoint::from_nu(nu);
            let base = log_base_density(alpha, p.ln_one_minus_nu);
            [nu, base.exp(), (base + delta * phi.log_phi(&p) - log_z).exp()]
        })
        .collect())
}
