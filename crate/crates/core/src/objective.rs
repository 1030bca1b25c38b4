//! The profiled KL objective: negative ELBO with `q(z)` replaced by its
//! closed-form optimum, as a function of the flat global parameters and a
//! two-dimensional prior perturbation `ε = (α − α_base, δ − δ_base)`.
//!
//! With optimal responsibilities the assignment terms collapse to
//! `Σ_n logsumexp_k s_{nk}`, so the objective is smooth in `η_θ` and its
//! gradient is available in closed form. The gradient is written generically
//! so the differentiation engine can push dual numbers through it to obtain
//! the Hessian and the mixed partials in `ε`.

use nalgebra::DMatrix;

use crate::diff::{Dual, Real, ScalarField};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, StickPoint, StickPriorSpec, LN_2PI};
use crate::variational::{
    chol_to_cov, expected_log_weights, tri_index, unpack_chol, GlobalParams, Layout, ModelSpec, Responsibilities,
};

/// Index of the concentration shift in the perturbation vector.
pub const EPS_ALPHA: usize = 0;
/// Index of the contamination weight shift in the perturbation vector.
pub const EPS_DELTA: usize = 1;

/// `KL(η_θ, ε)` up to the log evidence.
pub struct KlObjective<'a> {
    data: &'a Dataset,
    model: &'a ModelSpec,
    prior: StickPriorSpec,
    layout: Layout,
    psi: Vec<f64>,
    niw_const: f64,
}

impl<'a> KlObjective<'a> {
    pub fn new(data: &'a Dataset, model: &'a ModelSpec, prior: StickPriorSpec) -> Result<Self> {
        prior.validate()?;
        if let Some(phi) = &prior.phi {
            phi.validate()?;
        }
        if data.dim() != model.dim() {
            return Err(Error::Dimension {
                expected: model.dim(),
                got: data.dim(),
            });
        }
        let d = model.dim();
        let psi = (0..d * d).map(|i| model.niw.scale_matrix[(i / d, i % d)]).collect();
        Ok(KlObjective {
            data,
            model,
            layout: model.layout(),
            niw_const: model.niw.log_normalizer(),
            prior,
            psi,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn prior(&self) -> &StickPriorSpec {
        &self.prior
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    /// Objective at unperturbed `ε = 0`.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.eval(x, &[0.0, 0.0])
    }

    fn compute<T: Real>(&self, x: &[T], eps: &[T], want_grad: bool) -> (T, Vec<T>) {
        let lay = self.layout;
        let (k_all, d) = (lay.k, lay.d);
        let n_sticks = lay.n_sticks();
        let quad = self.model.quadrature();
        let alpha = eps[EPS_ALPHA] + self.prior.alpha;
        let delta = eps[EPS_DELTA] + self.prior.delta;
        let phi = self.prior.phi.as_ref();
        let mut grad = if want_grad { vec![T::zero(); lay.len()] } else { Vec::new() };

        // Stick moments and their derivatives in (loc, scale).
        let mut e_ln = Vec::with_capacity(n_sticks);
        let mut e_ln1m = Vec::with_capacity(n_sticks);
        let mut e_phi = Vec::with_capacity(n_sticks);
        let mut dm = Vec::with_capacity(n_sticks); // (da, db, dphi) / d loc
        let mut ds = Vec::with_capacity(n_sticks); // (da, db, dphi) / d scale
        let mut scales = Vec::with_capacity(n_sticks);
        for i in 0..n_sticks {
            let m = x[lay.loc(i)];
            let s = x[lay.log_scale(i)].exp();
            scales.push(s);
            let (mut a, mut b, mut f) = (T::zero(), T::zero(), T::zero());
            let (mut am, mut bm, mut fm) = (T::zero(), T::zero(), T::zero());
            let (mut as_, mut bs, mut fs) = (T::zero(), T::zero(), T::zero());
            for (&z, &w) in quad.nodes.iter().zip(&quad.weights) {
                let xx = m + s * z;
                let p = StickPoint::from_logit(xx);
                a += p.ln_nu * w;
                b += p.ln_one_minus_nu * w;
                if want_grad {
                    am += p.one_minus_nu * w;
                    bm -= p.nu * w;
                    as_ += p.one_minus_nu * (w * z);
                    bs -= p.nu * (w * z);
                }
                if let Some(phi) = phi {
                    if want_grad {
                        let pd = StickPoint::from_logit(Dual::variable(xx));
                        let lp = phi.log_phi(&pd);
                        f += lp.re * w;
                        fm += lp.eps * w;
                        fs += lp.eps * (w * z);
                    } else {
                        f += phi.log_phi(&p) * w;
                    }
                }
            }
            e_ln.push(a);
            e_ln1m.push(b);
            e_phi.push(f);
            dm.push((am, bm, fm));
            ds.push((as_, bs, fs));
        }
        let elog_pi = expected_log_weights(&e_ln, &e_ln1m);

        // Per-cluster covariance quantities.
        let mut sig_inv = Vec::with_capacity(k_all);
        let mut chol_sig = Vec::with_capacity(k_all);
        let mut chol_l = Vec::with_capacity(k_all);
        let mut base = Vec::with_capacity(k_all);
        let mut logdets = Vec::with_capacity(k_all);
        for k in 0..k_all {
            let packed = &x[lay.chol(k)..lay.chol(k) + lay.tri()];
            let l = unpack_chol(packed, d);
            let cov = chol_to_cov(&l, d, self.model.cov_floor);
            let c = match linalg::cholesky(&cov, d) {
                Some(c) => c,
                None => return (T::cst(f64::NAN), grad),
            };
            let ci = linalg::invert_lower(&c, d);
            let mut inv = vec![T::zero(); d * d];
            for i in 0..d {
                for j in 0..=i {
                    let mut s = T::zero();
                    for r in i..d {
                        s += ci[r * d + i] * ci[r * d + j];
                    }
                    inv[i * d + j] = s;
                    inv[j * d + i] = s;
                }
            }
            let mut half_logdet = T::zero();
            for i in 0..d {
                half_logdet += c[i * d + i].ln();
            }
            base.push(elog_pi[k] - half_logdet - 0.5 * d as f64 * LN_2PI);
            logdets.push(half_logdet * 2.0);
            sig_inv.push(inv);
            chol_sig.push(c);
            chol_l.push(l);
        }

        // Data terms: Σ_n logsumexp_k s_nk, accumulating responsibility-weighted
        // sufficient statistics for the gradient.
        let mut total = T::zero();
        let mut occ = vec![T::zero(); k_all];
        let mut first = vec![T::zero(); k_all * d];
        let mut second = vec![T::zero(); k_all * d * d];
        let mut scores = vec![T::zero(); k_all];
        let mut resid = vec![T::zero(); k_all * d];
        let mut white = vec![T::zero(); d];
        for y in self.data.points() {
            let mut smax = f64::NEG_INFINITY;
            let mut imax = 0;
            for k in 0..k_all {
                let mu = &x[lay.mean(k)..lay.mean(k) + d];
                let rk = &mut resid[k * d..(k + 1) * d];
                for i in 0..d {
                    rk[i] = -mu[i] + y[i];
                }
                linalg::solve_lower(&chol_sig[k], d, rk, &mut white);
                let mut q = T::zero();
                for w in &white {
                    q += *w * *w;
                }
                scores[k] = base[k] - q * 0.5;
                if scores[k].value() > smax {
                    smax = scores[k].value();
                    imax = k;
                }
            }
            let top = scores[imax];
            let mut sum = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - top).exp();
                sum += *s;
            }
            total += top + sum.ln();
            if want_grad {
                for k in 0..k_all {
                    let r = scores[k] / sum;
                    occ[k] += r;
                    let rk = &resid[k * d..(k + 1) * d];
                    for i in 0..d {
                        let ri = r * rk[i];
                        first[k * d + i] += ri;
                        for j in 0..=i {
                            second[(k * d + i) * d + j] += ri * rk[j];
                        }
                    }
                }
            }
        }

        // Conjugate prior on (μ_k, Σ_k).
        let niw = &self.model.niw;
        let coef = 0.5 * (niw.dof + d as f64 + 2.0);
        let mut diffs = vec![T::zero(); k_all * d];
        for k in 0..k_all {
            let mu = &x[lay.mean(k)..lay.mean(k) + d];
            let dk = &mut diffs[k * d..(k + 1) * d];
            for i in 0..d {
                dk[i] = mu[i] - niw.prior_mean[i];
            }
            let inv = &sig_inv[k];
            let mut trace = T::zero();
            for i in 0..d * d {
                trace += inv[i] * self.psi[i];
            }
            total += T::cst(self.niw_const) - logdets[k] * coef - linalg::quad_form(inv, dk, d) * (0.5 * niw.mean_scale)
                - trace * 0.5;
        }

        // Stick prior and logit-normal entropy.
        for i in 0..n_sticks {
            total += alpha.ln() + (alpha - 1.0) * e_ln1m[i];
            if phi.is_some() {
                total += delta * e_phi[i];
            }
            total += x[lay.log_scale(i)] + e_ln[i] + e_ln1m[i] + 0.5 * (LN_2PI + 1.0);
        }

        if !want_grad {
            return (-total, grad);
        }

        // Sticks: ∂/∂a_i = R_i + 1, ∂/∂b_i = Σ_{k>i} R_k + α.
        let mut tail = T::zero();
        for i in (0..n_sticks).rev() {
            tail += occ[i + 1];
            let ga = occ[i] + 1.0;
            let gb = tail + alpha;
            let (am, bm, fm) = dm[i];
            let (as_, bs, fs) = ds[i];
            let mut g_loc = ga * am + gb * bm;
            let mut g_scale = ga * as_ + gb * bs;
            if phi.is_some() {
                g_loc += delta * fm;
                g_scale += delta * fs;
            }
            grad[lay.loc(i)] = -g_loc;
            grad[lay.log_scale(i)] = -(g_scale * scales[i] + 1.0);
        }

        // Clusters: ∂/∂μ = Σ⁻¹(Σ_n r (y−μ) − κ(μ−m₀));
        // ∂/∂Σ = ½Σ⁻¹ M Σ⁻¹ − ½(R + ν + D + 2)Σ⁻¹ with M = S + κ d dᵀ + Ψ.
        for k in 0..k_all {
            let inv = &sig_inv[k];
            let dk = &diffs[k * d..(k + 1) * d];
            for i in 0..d {
                let mut g = T::zero();
                for j in 0..d {
                    g += inv[i * d + j] * (first[k * d + j] - dk[j] * niw.mean_scale);
                }
                grad[lay.mean(k) + i] = -g;
            }
            let mut m = vec![T::zero(); d * d];
            for i in 0..d {
                for j in 0..=i {
                    let v = second[(k * d + i) * d + j] + dk[i] * dk[j] * niw.mean_scale + self.psi[i * d + j];
                    m[i * d + j] = v;
                    m[j * d + i] = v;
                }
            }
            let sms = linalg::matmul(&linalg::matmul(inv, &m, d), inv, d);
            let scale = occ[k] + (niw.dof + d as f64 + 2.0);
            let mut g_sig = vec![T::zero(); d * d];
            for i in 0..d * d {
                g_sig[i] = (sms[i] - scale * inv[i]) * 0.5;
            }
            let gl = linalg::matmul(&g_sig, &chol_l[k], d);
            for i in 0..d {
                for j in 0..=i {
                    let mut v = gl[i * d + j] * 2.0;
                    if i == j {
                        v *= chol_l[k][i * d + i];
                    }
                    grad[lay.chol(k) + tri_index(i, j)] = -v;
                }
            }
        }
        (-total, grad)
    }
}

impl ScalarField for KlObjective<'_> {
    fn n_params(&self) -> usize {
        self.layout.len()
    }

    fn n_eps(&self) -> usize {
        2
    }

    fn eval<T: Real>(&self, x: &[T], eps: &[T]) -> T {
        self.compute(x, eps, false).0
    }

    fn value_grad<T: Real>(&self, x: &[T], eps: &[T]) -> (T, Vec<T>) {
        self.compute(x, eps, true)
    }
}

/// Negative ELBO at `η_z = optimal_responsibilities(η_θ)`.
pub fn profiled_kl(eta: &GlobalParams, data: &Dataset, model: &ModelSpec, pert: &StickPriorSpec) -> Result<f64> {
    let obj = KlObjective::new(data, model, pert.clone())?;
    if eta.layout != obj.layout() {
        return Err(Error::Dimension {
            expected: obj.layout().len(),
            got: eta.layout.len(),
        });
    }
    let v = obj.value(&eta.flatten());
    if v.is_finite() {
        return Ok(v);
    }
    // Locate the first component responsible for the overflow.
    for k in 0..model.k {
        let cov = eta.covariance(k, model.cov_floor);
        let finite_mean = eta.mean(k).iter().all(|v| v.is_finite());
        if !finite_mean || cov.iter().any(|v| !v.is_finite()) || cov.clone().cholesky().is_none() {
            return Err(Error::Overflow {
                what: "cluster parameters",
                index: k,
            });
        }
    }
    let m = eta.stick_moments(model.quadrature());
    if let Some(i) = (0..model.k - 1).find(|&i| !(m.e_log_nu[i].is_finite() && m.e_log_1m_nu[i].is_finite())) {
        return Err(Error::Overflow {
            what: "stick moments",
            index: i,
        });
    }
    Err(Error::Overflow {
        what: "objective",
        index: 0,
    })
}

/// Negative ELBO at arbitrary row-stochastic `r`; equals [`profiled_kl`] at
/// the optimal responsibilities and is never smaller anywhere else.
pub fn unprofiled_kl(
    eta: &GlobalParams,
    r: &Responsibilities,
    data: &Dataset,
    model: &ModelSpec,
    pert: &StickPriorSpec,
) -> Result<f64> {
    let scores = crate::variational::assignment_scores(eta, data, model)?;
    let profiled = profiled_kl(eta, data, model, pert)?;
    // profiled = non-data terms − Σ_n LSE(s_n); swap the data part.
    let lse: f64 = scores
        .row_iter()
        .map(|row| {
            let m = row.max();
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .sum();
    let mut elbo_data = 0.0;
    for n in 0..r.n() {
        for k in 0..r.k() {
            let rv = r.r[(n, k)];
            if rv > 0.0 {
                elbo_data += rv * (scores[(n, k)] - rv.ln());
            }
        }
    }
    Ok(profiled + lse - elbo_data)
}

/// Hessian of the objective as an nalgebra matrix at `ε = 0`.
pub fn objective_hessian(obj: &KlObjective<'_>, x: &[f64]) -> Result<DMatrix<f64>> {
    crate::diff::hessian(obj, x, &[0.0, 0.0])
}
