//! Linear response of the variational optimum to prior perturbations.
//!
//! With `H` the Hessian of the profiled KL at the optimum and `f` the cross
//! derivative `∂²KL/∂η∂ε`, the optimum moves to first order as
//!
//! ```text
//! η*(ε) ≈ η*(0) − H⁻¹ f ε
//! ```
//!
//! `H` is factorized once when the pack is built; every direction afterwards
//! costs one pair of triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::diff::{self, ScalarField};
use crate::error::{Error, Result};
use crate::model::{Dataset, StickPoint, StickPriorSpec};
use crate::objective::{KlObjective, EPS_ALPHA, EPS_DELTA};
use crate::optimize::FitResult;
use crate::perturbation::PhiSpec;
use crate::variational::{GlobalParams, ModelSpec};

/// Factorized Hessian at a base point, independent of the model layout.
#[derive(Clone, Debug)]
pub struct LinearResponse {
    base: Vec<f64>,
    hessian: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl LinearResponse {
    pub fn new(base: Vec<f64>, hessian: DMatrix<f64>) -> Result<Self> {
        if hessian.nrows() != base.len() || hessian.ncols() != base.len() {
            return Err(Error::Dimension {
                expected: base.len(),
                got: hessian.nrows(),
            });
        }
        let factor = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SecondOrder("Hessian does not admit a Cholesky factorization".into()))?;
        Ok(LinearResponse { base, hessian, factor })
    }

    /// Hessian of `f(·, eps)` at `x`.
    pub fn from_field<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Result<Self> {
        Self::new(x.to_vec(), diff::hessian(f, x, eps)?)
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn solve(&self, column: &[f64]) -> Result<Vec<f64>> {
        if column.len() != self.base.len() {
            return Err(Error::Dimension {
                expected: self.base.len(),
                got: column.len(),
            });
        }
        if let Some(i) = column.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { coordinate: i });
        }
        Ok(self.factor.solve(&DVector::from_column_slice(column)).as_slice().to_vec())
    }

    /// `base − Σ_j response_j ε_j`.
    pub fn extrapolate_flat(&self, terms: &[(&[f64], f64)]) -> Vec<f64> {
        let mut out = self.base.clone();
        for (response, eps) in terms {
            if *eps == 0.0 {
                continue;
            }
            for (o, r) in out.iter_mut().zip(response.iter()) {
                *o -= r * eps;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionKind {
    AlphaShift,
    Functional,
}

impl DirectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectionKind::AlphaShift => "alpha_shift",
            DirectionKind::Functional => "functional",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PerturbationDirection {
    pub name: String,
    pub kind: DirectionKind,
    pub phi: Option<PhiSpec>,
    /// `∂²KL/∂η∂ε` at the base optimum.
    pub column: Vec<f64>,
    /// `H⁻¹ column`.
    pub response: Vec<f64>,
}

impl PerturbationDirection {
    pub fn from_column(
        lr: &LinearResponse,
        name: impl Into<String>,
        kind: DirectionKind,
        phi: Option<PhiSpec>,
        column: Vec<f64>,
    ) -> Result<Self> {
        let response = lr.solve(&column)?;
        Ok(PerturbationDirection {
            name: name.into(),
            kind,
            phi,
            column,
            response,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SensitivityPack {
    pub eta_base: GlobalParams,
    pub base_prior: StickPriorSpec,
    pub linear: LinearResponse,
    pub registered: Vec<PerturbationDirection>,
}

impl SensitivityPack {
    pub fn base_alpha(&self) -> f64 {
        self.base_prior.alpha
    }

    pub fn register(&mut self, dir: PerturbationDirection) {
        self.registered.push(dir);
    }

    pub fn direction(&self, name: &str) -> Option<&PerturbationDirection> {
        self.registered.iter().find(|d| d.name == name)
    }
}

/// Factorizes the KL Hessian at a converged fit.
pub fn build_pack(fit: &FitResult, data: &Dataset, model: &ModelSpec) -> Result<SensitivityPack> {
    if !fit.converged {
        return Err(Error::SecondOrder("fit did not converge; refusing to linearize".into()));
    }
    let obj = KlObjective::new(data, model, fit.prior.clone())?;
    let x = fit.eta_opt.flatten();
    let linear = LinearResponse::from_field(&obj, &x, &[0.0, 0.0])?;
    Ok(SensitivityPack {
        eta_base: fit.eta_opt.clone(),
        base_prior: fit.prior.clone(),
        linear,
        registered: Vec::new(),
    })
}

fn cross_column(obj: &KlObjective<'_>, x: &[f64], index: usize) -> Result<Vec<f64>> {
    let cross = diff::cross_derivative(obj, x, &[0.0, 0.0])?;
    Ok(cross.column(index).iter().copied().collect())
}

/// Direction for `ε = α − α₀`.
pub fn alpha_direction(pack: &SensitivityPack, data: &Dataset, model: &ModelSpec) -> Result<PerturbationDirection> {
    let obj = KlObjective::new(data, model, pack.base_prior.clone())?;
    let column = cross_column(&obj, &pack.eta_base.flatten(), EPS_ALPHA)?;
    PerturbationDirection::from_column(&pack.linear, "alpha", DirectionKind::AlphaShift, None, column)
}

/// Direction for the multiplicative contamination `p₀ φ^δ` at `δ = 0`. The
/// normalizer of the contaminated prior does not depend on `η` and drops out.
pub fn functional_direction(
    pack: &SensitivityPack,
    phi: &PhiSpec,
    data: &Dataset,
    model: &ModelSpec,
) -> Result<PerturbationDirection> {
    if pack.base_prior.phi.is_some() && pack.base_prior.delta != 0.0 {
        return Err(Error::Config(
            "functional directions are taken about an unperturbed base prior".into(),
        ));
    }
    let eta = &pack.eta_base;
    let quad = model.quadrature();
    for i in 0..eta.layout.n_sticks() {
        let (m, s) = (eta.stick_loc[i], eta.stick_scale(i));
        for (j, z) in quad.nodes.iter().enumerate() {
            let p = StickPoint::from_logit(m + s * z);
            if !phi.log_phi(&p).is_finite() {
                return Err(Error::Quadrature(format!(
                    "log φ is not finite at stick {i}, quadrature node {j} (ν = {})",
                    p.nu
                )));
            }
        }
    }
    let prior = StickPriorSpec::perturbed(pack.base_prior.alpha, phi.clone(), 0.0);
    let obj = KlObjective::new(data, model, prior)?;
    let column = cross_column(&obj, &eta.flatten(), EPS_DELTA)?;
    PerturbationDirection::from_column(&pack.linear, phi.label(), DirectionKind::Functional, Some(phi.clone()), column)
}

/// First-order prediction of the optimum at perturbation size `epsilon`
/// (`α − α₀` for alpha shifts, `δ` for functional directions).
pub fn extrapolate(pack: &SensitivityPack, dir: &PerturbationDirection, epsilon: f64) -> GlobalParams {
    extrapolate_combined(pack, &[(dir, epsilon)])
}

/// Sum of several first-order moves.
pub fn extrapolate_combined(pack: &SensitivityPack, terms: &[(&PerturbationDirection, f64)]) -> GlobalParams {
    let flat: Vec<(&[f64], f64)> = terms.iter().map(|(d, e)| (d.response.as_slice(), *e)).collect();
    let x = pack.linear.extrapolate_flat(&flat);
    GlobalParams::unflatten(pack.eta_base.layout, &x).expect("response length matches the layout")
}

/// Largest per-coordinate relative difference over coordinates of `reference`
/// with magnitude above `floor`.
pub fn coordinate_rel_err(value: &[f64], reference: &[f64], floor: f64) -> f64 {
    value
        .iter()
        .zip(reference)
        .filter(|(_, r)| r.abs() > floor)
        .map(|(v, r)| (v - r).abs() / r.abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Real;
    use crate::optimize::{initialize, optimize, OptimizeOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn toy(n: usize) -> ShiftedQuadratic {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        ShiftedQuadratic {
            a: &m * m.transpose() + DMatrix::identity(n, n),
            shift: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        }
    }

    #[test]
    fn quadratic_toy_is_extrapolated_exactly() {
        let q = toy(7);
        let x0 = vec![0.0; 7];
        let lr = LinearResponse::from_field(&q, &x0, &[0.0]).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((lr.hessian()[(i, j)] - q.a[(i, j)]).abs() < 1e-12);
            }
        }
        let col: Vec<f64> = diff::cross_derivative(&q, &x0, &[0.0]).unwrap().column(0).iter().copied().collect();
        let dir = PerturbationDirection::from_column(&lr, "toy", DirectionKind::AlphaShift, None, col).unwrap();
        for eps in [-1.0, 0.5, 2.0] {
            let x = lr.extrapolate_flat(&[(&dir.response, eps)]);
            for (xi, ai) in x.iter().zip(&q.shift) {
                assert!((xi - ai * eps).abs() < 1e-10);
            }
        }
        assert_eq!(lr.extrapolate_flat(&[(&dir.response, 0.0)]), x0);
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(LinearResponse::new(vec![0.0, 0.0], h), Err(Error::SecondOrder(_))));
    }

    #[test]
    fn extrapolation_is_additive_and_homogeneous() {
        let q = toy(5);
        let lr = LinearResponse::from_field(&q, &[0.0; 5], &[0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c1: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c2: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r1 = lr.solve(&c1).unwrap();
        let r2 = lr.solve(&c2).unwrap();
        let both = lr.extrapolate_flat(&[(&r1, 0.7), (&r2, -1.3)]);
        let a = lr.extrapolate_flat(&[(&r1, 0.7)]);
        let b = lr.extrapolate_flat(&[(&r2, -1.3)]);
        for i in 0..5 {
            assert!((both[i] - (a[i] + b[i])).abs() < 1e-12);
        }
        let twice = lr.extrapolate_flat(&[(&r1, 1.4)]);
        for i in 0..5 {
            assert!((twice[i] - 2.0 * a[i]).abs() < 1e-12);
        }
    }

    fn small_fit() -> (Dataset, ModelSpec, FitResult) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        for c in [[0.0, 0.0], [4.0, 1.0], [1.0, 5.0]] {
            for _ in 0..25 {
                rows.push(vec![c[0] + rng.gen_range(-1.0..1.0), c[1] + rng.gen_range(-1.0..1.0)]);
            }
        }
        let data = Dataset::new(rows).unwrap();
        let model = ModelSpec::for_data(&data, 5, 2.0).unwrap();
        let init = initialize(&data, &model, 0).unwrap();
        let fit = optimize(&init, &data, &model, &StickPriorSpec::beta(2.0), &OptimizeOptions::with_tol(1e-9)).unwrap();
        assert!(fit.converged);
        (data, model, fit)
    }

    #[test]
    fn pack_directions_and_identities() {
        let (data, model, fit) = small_fit();
        let pack = build_pack(&fit, &data, &model).unwrap();
        let alpha = alpha_direction(&pack, &data, &model).unwrap();
        let layout = pack.eta_base.layout;
        assert!(alpha.column[layout.cluster_start()..].iter().all(|&v| v == 0.0));

        // Solve correctness.
        let eps = 0.37;
        let moved = extrapolate(&pack, &alpha, eps).flatten();
        let diff: Vec<f64> = pack.linear.base().iter().zip(&moved).map(|(a, b)| a - b).collect();
        let lhs = pack.linear.hessian() * DVector::from_column_slice(&diff);
        let rhs: Vec<f64> = alpha.column.iter().map(|c| c * eps).collect();
        assert!(diff::rel_err(lhs.as_slice(), &rhs) < 1e-8);

        // ε = 0 returns the base exactly.
        assert_eq!(extrapolate(&pack, &alpha, 0.0).flatten(), fit.eta_opt.flatten());

        // Prior swap is a scaled alpha column.
        let a0 = pack.base_alpha();
        for a1 in [a0 + 1.0, a0 - 0.5, 3.0 * a0] {
            let swap = functional_direction(&pack, &PhiSpec::prior_swap(a0, a1), &data, &model).unwrap();
            let scaled: Vec<f64> = alpha.column.iter().map(|c| c * (a1 - a0)).collect();
            assert!(diff::rel_err(&swap.column, &scaled) < 1e-10);
        }

        // Constant and unit φ give zero columns.
        for phi in [PhiSpec::exp_tilt(0.0), PhiSpec::polynomial(vec![2.5])] {
            let d = functional_direction(&pack, &phi, &data, &model).unwrap();
            assert!(d.column.iter().all(|v| v.abs() < 1e-14), "{}", phi.label());
        }
    }

    #[test]
    fn alpha_column_matches_quadrature_moments() {
        // K = 2 has one free stick; its column is −d/dη E log(1−ν).
        let data = Dataset::new(vec![vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let model = ModelSpec::for_data(&data, 2, 1.5).unwrap();
        let init = initialize(&data, &model, 0).unwrap();
        let fit = optimize(&init, &data, &model, &StickPriorSpec::beta(1.5), &OptimizeOptions::with_tol(1e-10)).unwrap();
        let pack = build_pack(&fit, &data, &model).unwrap();
        let dir = alpha_direction(&pack, &data, &model).unwrap();
        let (m, ls) = (fit.eta_opt.stick_loc[0], fit.eta_opt.stick_log_scale[0]);
        let b = |m: f64, ls: f64| crate::variational::stick_moments(m, ls.exp(), model.quadrature().len()).unwrap().1;
        let h = 1e-6;
        let dm = (b(m + h, ls) - b(m - h, ls)) / (2.0 * h);
        let dls = (b(m, ls + h) - b(m, ls - h)) / (2.0 * h);
        assert!((dir.column[0] + dm).abs() < 1e-7, "{} vs {}", dir.column[0], -dm);
        assert!((dir.column[1] + dls).abs() < 1e-7);
    }

    #[test]
    fn unconverged_fit_is_rejected() {
        let (data, model, mut fit) = small_fit();
        fit.converged = false;
        assert!(matches!(build_pack(&fit, &data, &model), Err(Error::SecondOrder(_))));
    }

    #[test]
    fn non_finite_phi_names_the_node() {
        let (data, model, fit) = small_fit();
        let pack = build_pack(&fit, &data, &model).unwrap();
        let table = crate::perturbation::PhiTable::new(vec![0.1, 0.5, 0.9], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(functional_direction(&pack, &PhiSpec::Tabulated(table), &data, &model).is_ok());
        let err = functional_direction(&pack, &PhiSpec::polynomial(vec![0.0, f64::INFINITY]), &data, &model);
        assert!(matches!(err, Err(Error::Quadrature(msg)) if msg.contains("node")));
    }

    #[test]
    fn linear_step_tracks_refits() {
        let (data, model, fit) = small_fit();
        let pack = build_pack(&fit, &data, &model).unwrap();
        let dir = alpha_direction(&pack, &data, &model).unwrap();
        let h = 0.05;
        let refit = |alpha: f64| {
            optimize(&fit.eta_opt, &data, &model, &StickPriorSpec::beta(alpha), &OptimizeOptions::with_tol(1e-10))
                .unwrap()
                .eta_opt
                .flatten()
        };
        let a0 = pack.base_alpha();
        let (up, down) = (refit(a0 + h), refit(a0 - h));
        let fd: Vec<f64> = up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect();
        let lin: Vec<f64> = dir.response.iter().map(|r| -r).collect();
        assert!(coordinate_rel_err(&lin, &fd, 1e-3) < 1e-2);
    }
}
