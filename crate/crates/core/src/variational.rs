//! The variational family: logit-normal sticks, point-mass cluster
//! parameters, and categorical assignments whose optimum given the global
//! parameters is available in closed form.

use nalgebra::{DMatrix, DVector};

use crate::diff::Real;
use crate::error::{Error, Result};
use crate::model::{ClusterParams, Dataset, NiwPriorSpec, StickPoint, LN_2PI};
use crate::quadrature::GaussHermite;

/// Truncation level, base concentration, conjugate prior and numerical
/// settings shared by every fit of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub k: usize,
    pub alpha0: f64,
    pub niw: NiwPriorSpec,
    /// Added to every `L Lᵀ`, so covariances never drop below `cov_floor · I`.
    pub cov_floor: f64,
    quad: GaussHermite,
}

impl ModelSpec {
    pub const DEFAULT_K: usize = 30;
    pub const DEFAULT_QUAD_NODES: usize = 30;
    pub const DEFAULT_COV_FLOOR: f64 = 1e-4;

    pub fn new(k: usize, alpha0: f64, niw: NiwPriorSpec, n_quad: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("truncation K must be at least 1"));
        }
        if !(alpha0 > 0.0) {
            return Err(Error::domain(format!("alpha0 must be positive, got {alpha0}")));
        }
        niw.validate()?;
        Ok(ModelSpec {
            k,
            alpha0,
            niw,
            cov_floor: Self::DEFAULT_COV_FLOOR,
            quad: GaussHermite::new(n_quad)?,
        })
    }

    /// Default hyperparameters derived from the data.
    pub fn for_data(data: &Dataset, k: usize, alpha0: f64) -> Result<Self> {
        Self::new(k, alpha0, NiwPriorSpec::default_for(data), Self::DEFAULT_QUAD_NODES)
    }

    pub fn with_cov_floor(mut self, floor: f64) -> Self {
        self.cov_floor = floor;
        self
    }

    pub fn dim(&self) -> usize {
        self.niw.dim()
    }

    pub fn quadrature(&self) -> &GaussHermite {
        &self.quad
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.k, self.dim())
    }
}

/// Offsets of each block in the flat parameter vector:
/// `[stick_loc (K−1) | stick_log_scale (K−1) | means (K·D) | cov_chol (K·D(D+1)/2)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub d: usize,
}

impl Layout {
    pub fn new(k: usize, d: usize) -> Self {
        Layout { k, d }
    }

    pub fn n_sticks(&self) -> usize {
        self.k - 1
    }

    pub fn tri(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    pub fn loc(&self, i: usize) -> usize {
        i
    }

    pub fn log_scale(&self, i: usize) -> usize {
        self.n_sticks() + i
    }

    pub fn mean(&self, k: usize) -> usize {
        2 * self.n_sticks() + k * self.d
    }

    pub fn chol(&self, k: usize) -> usize {
        2 * self.n_sticks() + self.k * self.d + k * self.tri()
    }

    /// First index of the mean/covariance blocks.
    pub fn cluster_start(&self) -> usize {
        2 * self.n_sticks()
    }

    pub fn len(&self) -> usize {
        2 * self.n_sticks() + self.k * (self.d + self.tri())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Packed index of lower-triangular entry `(i, j)`, `j ≤ i`.
#[inline]
pub(crate) fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Unconstrained global variational parameters `η_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalParams {
    pub layout: Layout,
    pub stick_loc: Vec<f64>,
    /// Log of the logit-normal scale.
    pub stick_log_scale: Vec<f64>,
    /// Row-major K×D.
    pub means: Vec<f64>,
    /// Per cluster, packed lower-triangular Cholesky factor with log diagonal.
    pub cov_chol: Vec<f64>,
}

impl GlobalParams {
    pub fn zeros(layout: Layout) -> Self {
        GlobalParams {
            layout,
            stick_loc: vec![0.0; layout.n_sticks()],
            stick_log_scale: vec![0.0; layout.n_sticks()],
            means: vec![0.0; layout.k * layout.d],
            cov_chol: vec![0.0; layout.k * layout.tri()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layout.len());
        v.extend_from_slice(&self.stick_loc);
        v.extend_from_slice(&self.stick_log_scale);
        v.extend_from_slice(&self.means);
        v.extend_from_slice(&self.cov_chol);
        v
    }

    pub fn unflatten(layout: Layout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.len() {
            return Err(Error::Dimension {
                expected: layout.len(),
                got: v.len(),
            });
        }
        let s = layout.n_sticks();
        let c = layout.cluster_start();
        let m_end = c + layout.k * layout.d;
        Ok(GlobalParams {
            layout,
            stick_loc: v[..s].to_vec(),
            stick_log_scale: v[s..c].to_vec(),
            means: v[c..m_end].to_vec(),
            cov_chol: v[m_end..].to_vec(),
        })
    }

    pub fn stick_scale(&self, i: usize) -> f64 {
        self.stick_log_scale[i].exp()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.layout.d..(k + 1) * self.layout.d]
    }

    /// Dense lower-triangular factor `L_k` (row-major).
    pub fn chol_factor(&self, k: usize) -> Vec<f64> {
        let d = self.layout.d;
        let packed = &self.cov_chol[k * self.layout.tri()..(k + 1) * self.layout.tri()];
        unpack_chol(packed, d)
    }

    /// `Σ_k = L_k L_kᵀ + floor · I`.
    pub fn covariance(&self, k: usize, floor: f64) -> DMatrix<f64> {
        let d = self.layout.d;
        let cov = chol_to_cov(&self.chol_factor(k), d, floor);
        DMatrix::from_row_slice(d, d, &cov)
    }

    pub fn cluster(&self, k: usize, floor: f64) -> ClusterParams {
        ClusterParams {
            mean: DVector::from_column_slice(self.mean(k)),
            covariance: self.covariance(k, floor),
        }
    }

    /// Sets cluster `k` so that its covariance (including the floor) equals
    /// `cov + floor·I`.
    pub fn set_cluster(&mut self, k: usize, mean: &[f64], cov: &DMatrix<f64>) -> Result<()> {
        let d = self.layout.d;
        self.means[k * d..(k + 1) * d].copy_from_slice(mean);
        let l = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("initial covariance of cluster {k}")))?
            .l();
        let base = k * self.layout.tri();
        for i in 0..d {
            for j in 0..=i {
                self.cov_chol[base + tri_index(i, j)] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            }
        }
        Ok(())
    }

    pub fn stick_moments(&self, quad: &GaussHermite) -> StickMoments {
        let mut m = StickMoments {
            e_log_nu: Vec::with_capacity(self.layout.n_sticks()),
            e_log_1m_nu: Vec::with_capacity(self.layout.n_sticks()),
            entropy: 0.0,
        };
        for i in 0..self.layout.n_sticks() {
            let (a, b, h) = moments_with_rule(self.stick_loc[i], self.stick_scale(i), quad);
            m.e_log_nu.push(a);
            m.e_log_1m_nu.push(b);
            m.entropy += h;
        }
        m
    }

    /// `E_q[log π_k]` for all K components, the last stick fixed at one.
    pub fn expected_log_weights(&self, quad: &GaussHermite) -> Vec<f64> {
        let m = self.stick_moments(quad);
        expected_log_weights(&m.e_log_nu, &m.e_log_1m_nu)
    }
}

pub(crate) fn unpack_chol<T: Real>(packed: &[T], d: usize) -> Vec<T> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let v = packed[tri_index(i, j)];
            l[i * d + j] = if i == j { v.exp() } else { v };
        }
    }
    l
}

pub(crate) fn chol_to_cov<T: Real>(l: &[T], d: usize, floor: f64) -> Vec<T> {
    let mut c = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = T::zero();
            for k in 0..=j {
                s += l[i * d + k] * l[j * d + k];
            }
            if i == j {
                s = s + floor;
            }
            c[i * d + j] = s;
            c[j * d + i] = s;
        }
    }
    c
}

pub(crate) fn expected_log_weights<T: Real>(e_log_nu: &[T], e_log_1m_nu: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(e_log_nu.len() + 1);
    let mut acc = T::zero();
    for (a, b) in e_log_nu.iter().zip(e_log_1m_nu) {
        out.push(acc + *a);
        acc += *b;
    }
    out.push(acc);
    out
}

/// Expectations under one logit-normal stick.
#[derive(Clone, Debug, PartialEq)]
pub struct StickMoments {
    pub e_log_nu: Vec<f64>,
    pub e_log_1m_nu: Vec<f64>,
    /// Summed entropy of all stick distributions.
    pub entropy: f64,
}

const HALF_LN_2PI_E: f64 = 0.5 * (LN_2PI + 1.0);

fn moments_with_rule(loc: f64, scale: f64, quad: &GaussHermite) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    for (z, w) in quad.nodes.iter().zip(&quad.weights) {
        let p = StickPoint::from_logit(loc + scale * z);
        a += w * p.ln_nu;
        b += w * p.ln_one_minus_nu;
    }
    (a, b, HALF_LN_2PI_E + scale.ln() + a + b)
}

/// `(E[log ν], E[log(1 − ν)], entropy)` for `ν = σ(x)`, `x ~ N(loc, scale²)`,
/// by `n_quad`-point Gauss–Hermite quadrature.
pub fn stick_moments(loc: f64, scale: f64, n_quad: usize) -> Result<(f64, f64, f64)> {
    if !(scale > 0.0) {
        return Err(Error::domain(format!("stick scale must be positive, got {scale}")));
    }
    Ok(moments_with_rule(loc, scale, &GaussHermite::new(n_quad)?))
}

/// Soft assignments `r_{nk}`, stored N×K.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub r: DMatrix<f64>,
}

impl Responsibilities {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn k(&self) -> usize {
        self.r.ncols()
    }

    /// Validates row-stochasticity to `1e-12`.
    pub fn from_matrix(r: DMatrix<f64>) -> Result<Self> {
        for (n, row) in r.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!("row {n} is not a probability vector")));
            }
        }
        Ok(Responsibilities { r })
    }

    /// `Σ_k r_{nk}` per cluster.
    pub fn occupancy(&self) -> Vec<f64> {
        self.r.column_iter().map(|c| c.sum()).collect()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &DMatrix<f64>) -> Responsibilities {
    let mut r = scores.clone();
    for mut row in r.row_iter_mut() {
        let m = row.max();
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s = row.sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Responsibilities { r }
}

/// Unnormalized log responsibilities `E_q[log π_k] + log N(y_n | μ_k, Σ_k)`.
pub fn assignment_scores(eta: &GlobalParams, data: &Dataset, model: &ModelSpec) -> Result<DMatrix<f64>> {
    let layout = eta.layout;
    if layout != model.layout() {
        return Err(Error::Dimension {
            expected: model.layout().len(),
            got: layout.len(),
        });
    }
    if data.dim() != layout.d {
        return Err(Error::Dimension {
            expected: layout.d,
            got: data.dim(),
        });
    }
    let d = layout.d;
    let elog_pi = eta.expected_log_weights(model.quadrature());
    let mut scores = DMatrix::zeros(data.n(), layout.k);
    let mut resid = vec![0.0; d];
    let mut whitened = vec![0.0; d];
    for k in 0..layout.k {
        let cov = chol_to_cov(&eta.chol_factor(k), d, model.cov_floor);
        let c = crate::linalg::cholesky(&cov, d)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("covariance of cluster {k}")))?;
        let half_logdet: f64 = (0..d).map(|i| c[i * d + i].ln()).sum();
        let mu = eta.mean(k);
        let base = elog_pi[k] - 0.5 * d as f64 * LN_2PI - half_logdet;
        for (n, y) in data.points().enumerate() {
            for i in 0..d {
                resid[i] = y[i] - mu[i];
            }
            crate::linalg::solve_lower(&c, d, &resid, &mut whitened);
            let q: f64 = whitened.iter().map(|v| v * v).sum();
            scores[(n, k)] = base - 0.5 * q;
        }
    }
    Ok(scores)
}

/// Closed-form optimal `q(z)` given `η_θ`.
pub fn optimal_responsibilities(eta: &GlobalParams, data: &Dataset, model: &ModelSpec) -> Result<Responsibilities> {
    Ok(softmax_rows(&assignment_scores(eta, data, model)?))
}
