//! Exact first and second derivatives of scalar objectives `f(x, ε)`.
//!
//! Gradients come from [`ScalarField::value_grad`], which defaults to
//! forward-mode propagation (one dual pass per coordinate) and may be
//! overridden by fields that know a cheaper exact gradient. Hessians and mixed
//! partials are always the forward-mode Jacobian of that gradient, one dual
//! pass per column. Finite differences appear only in [`fd_check`].

mod dual;

pub use dual::{Dual, Real};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A twice-differentiable objective over parameters `x` (length `n_params`)
/// and perturbation `eps` (length `n_eps`).
pub trait ScalarField: Sync {
    fn n_params(&self) -> usize;
    fn n_eps(&self) -> usize;

    fn eval<T: Real>(&self, x: &[T], eps: &[T]) -> T;

    /// Value and gradient in `x`. Implementations must stay generic so the
    /// engine can differentiate the gradient itself.
    fn value_grad<T: Real>(&self, x: &[T], eps: &[T]) -> (T, Vec<T>) {
        forward_value_grad(self, x, eps)
    }
}

/// Gradient by one forward-mode pass per coordinate.
pub fn forward_value_grad<F, T>(f: &F, x: &[T], eps: &[T]) -> (T, Vec<T>)
where
    F: ScalarField + ?Sized,
    T: Real,
{
    let eps_d: Vec<Dual<T>> = eps.iter().map(|&e| Dual::constant(e)).collect();
    let mut xd: Vec<Dual<T>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut grad = Vec::with_capacity(x.len());
    let mut value = None;
    for i in 0..x.len() {
        xd[i].eps = T::one();
        let out = f.eval(&xd, &eps_d);
        xd[i].eps = T::zero();
        value.get_or_insert(out.re);
        grad.push(out.eps);
    }
    let value = value.unwrap_or_else(|| f.eval(x, eps));
    (value, grad)
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|g| !g.is_finite()) {
        Some(coordinate) => Err(Error::NonFinite { coordinate }),
        None => Ok(()),
    }
}

fn check_dims<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Result<()> {
    if x.len() != f.n_params() {
        return Err(Error::Dimension {
            expected: f.n_params(),
            got: x.len(),
        });
    }
    if eps.len() != f.n_eps() {
        return Err(Error::Dimension {
            expected: f.n_eps(),
            got: eps.len(),
        });
    }
    Ok(())
}

pub fn gradient<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    value_and_gradient(f, x, eps).map(|(_, g)| g)
}

pub fn value_and_gradient<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dims(f, x, eps)?;
    let (v, g) = f.value_grad(x, eps);
    check_finite(&g)?;
    Ok((v, g))
}

/// Second directional derivative of the gradient along coordinate `j` of `x`.
fn hessian_column<F: ScalarField>(f: &F, x: &[f64], eps: &[f64], j: usize) -> Result<Vec<f64>> {
    let mut xd: Vec<Dual<f64>> = x.iter().map(|&v| Dual::constant(v)).collect();
    xd[j].eps = 1.0;
    let eps_d: Vec<Dual<f64>> = eps.iter().map(|&e| Dual::constant(e)).collect();
    let (_, g) = f.value_grad(&xd, &eps_d);
    let col: Vec<f64> = g.iter().map(|d| d.eps).collect();
    check_finite(&col)?;
    Ok(col)
}

/// Selected columns of the Hessian, unsymmetrized (P × cols.len()).
pub fn hessian_columns<F: ScalarField>(
    f: &F,
    x: &[f64],
    eps: &[f64],
    cols: &[usize],
) -> Result<DMatrix<f64>> {
    check_dims(f, x, eps)?;
    let p = x.len();
    let columns: Vec<Vec<f64>> = cols
        .par_iter()
        .map(|&j| hessian_column(f, x, eps, j))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(p, cols.len(), |i, c| columns[c][i]))
}

/// Dense Hessian in `x`, symmetrized as `(M + Mᵀ)/2`.
pub fn hessian<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Result<DMatrix<f64>> {
    let all: Vec<usize> = (0..x.len()).collect();
    let m = hessian_columns(f, x, eps, &all)?;
    Ok((&m + m.transpose()) * 0.5)
}

/// Mixed partials `∂²f/∂x∂εᵀ` (P × E).
pub fn cross_derivative<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Result<DMatrix<f64>> {
    check_dims(f, x, eps)?;
    let xd: Vec<Dual<f64>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let columns: Vec<Vec<f64>> = (0..eps.len())
        .into_par_iter()
        .map(|e| {
            let mut eps_d: Vec<Dual<f64>> = eps.iter().map(|&v| Dual::constant(v)).collect();
            eps_d[e].eps = 1.0;
            let (_, g) = f.value_grad(&xd, &eps_d);
            let col: Vec<f64> = g.iter().map(|d| d.eps).collect();
            check_finite(&col)?;
            Ok(col)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(x.len(), eps.len(), |i, c| columns[c][i]))
}

/// Worst-case relative discrepancies between engine derivatives and central
/// differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub step: f64,
    pub gradient_rel_err: f64,
    pub hessian_rel_err: f64,
    pub cross_rel_err: f64,
    /// Estimated roundoff in a difference quotient, relative to gradient scale.
    pub roundoff_estimate: f64,
    /// Set when roundoff, not truncation, dominates the difference quotients.
    pub roundoff_dominated: bool,
    pub hessian_columns_checked: usize,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.gradient_rel_err
            .max(self.hessian_rel_err)
            .max(self.cross_rel_err)
    }
}

/// `max|a−b| / max(max|a|, max|b|)`; zero when both vectors vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

const ROUNDOFF_FLAG: f64 = 1e-6;

/// Checks gradient, every Hessian column and every cross column.
pub fn fd_check<F: ScalarField>(f: &F, x: &[f64], eps: &[f64], step: f64) -> Result<FdReport> {
    let all: Vec<usize> = (0..x.len()).collect();
    fd_check_columns(f, x, eps, step, &all)
}

/// Like [`fd_check`] but restricted to the listed Hessian columns.
pub fn fd_check_columns<F: ScalarField>(
    f: &F,
    x: &[f64],
    eps: &[f64],
    step: f64,
    cols: &[usize],
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {step}")));
    }
    let (f0, grad) = value_and_gradient(f, x, eps)?;

    let fd_grad: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += step;
            xm[i] -= step;
            (f.eval(&xp, eps) - f.eval(&xm, eps)) / (2.0 * step)
        })
        .collect();
    let gradient_rel_err = rel_err(&grad, &fd_grad);

    let h = hessian_columns(f, x, eps, cols)?;
    let mut hessian_rel_err: f64 = 0.0;
    for (c, &j) in cols.iter().enumerate() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        let gp = f.value_grad(&xp, eps).1;
        let gm = f.value_grad(&xm, eps).1;
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        let col: Vec<f64> = h.column(c).iter().copied().collect();
        hessian_rel_err = hessian_rel_err.max(rel_err(&col, &fd));
    }

    let cross = cross_derivative(f, x, eps)?;
    let mut cross_rel_err: f64 = 0.0;
    for e in 0..eps.len() {
        let mut ep = eps.to_vec();
        let mut em = eps.to_vec();
        ep[e] += step;
        em[e] -= step;
        let gp = f.value_grad(x, &ep).1;
        let gm = f.value_grad(x, &em).1;
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        let col: Vec<f64> = cross.column(e).iter().copied().collect();
        cross_rel_err = cross_rel_err.max(rel_err(&col, &fd));
    }

    let gscale = grad.iter().map(|g| g.abs()).fold(1.0, f64::max);
    let roundoff_estimate = f64::EPSILON * (f0.abs() + 1.0) / step / gscale;
    Ok(FdReport {
        step,
        gradient_rel_err,
        hessian_rel_err,
        cross_rel_err,
        roundoff_estimate,
        roundoff_dominated: roundoff_estimate > ROUNDOFF_FLAG,
        hessian_columns_checked: cols.len(),
    })
}
