//! Initialization and minimization of the profiled KL.
//!
//! Minimization runs limited-memory BFGS with a strong-Wolfe line search until
//! the gradient is small, then polishes with full Newton steps on the exact
//! Hessian. A candidate is accepted only if the gradient meets tolerance and
//! the Hessian factorizes; otherwise the search restarts from a perturbed
//! point, at most `max_restarts` times.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{self, ScalarField};
use crate::error::{Error, Result};
use crate::model::{Dataset, StickPriorSpec};
use crate::objective::KlObjective;
use crate::variational::{GlobalParams, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOptions {
    /// Convergence threshold on `‖∇f‖_∞`.
    pub grad_tol: f64,
    pub lbfgs_memory: usize,
    pub max_lbfgs_iter: usize,
    /// Switch to Newton once `‖∇f‖_∞` drops below this.
    pub newton_switch_tol: f64,
    pub max_newton_iter: usize,
    pub max_restarts: usize,
    pub restart_noise: f64,
    pub seed: u64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            grad_tol: 1e-6,
            lbfgs_memory: 10,
            max_lbfgs_iter: 20_000,
            newton_switch_tol: 1e-2,
            max_newton_iter: 100,
            max_restarts: 3,
            restart_noise: 0.05,
            seed: 0,
        }
    }
}

impl OptimizeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OptimizeOptions {
            grad_tol: tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub hessian_min_eig: f64,
    pub lbfgs_iterations: usize,
    pub newton_iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    /// Objective after every accepted step of the final attempt, starting
    /// with the initial value. Newton steps whose predicted decrease is below
    /// the rounding error of the objective are left out.
    pub trace: Vec<f64>,
}

impl MinimizeResult {
    pub fn iterations(&self) -> usize {
        self.lbfgs_iterations + self.newton_iterations
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect()
}

struct Eval {
    f: f64,
    g: Vec<f64>,
}

fn evaluate<F: ScalarField>(f: &F, x: &[f64], eps: &[f64]) -> Eval {
    let (v, g) = f.value_grad(x, eps);
    if v.is_finite() && g.iter().all(|g| g.is_finite()) {
        Eval { f: v, g }
    } else {
        Eval {
            f: f64::INFINITY,
            g,
        }
    }
}

/// Strong-Wolfe line search along `p` (Nocedal & Wright, Alg. 3.5/3.6).
fn wolfe_search<F: ScalarField>(
    f: &F,
    eps: &[f64],
    x: &[f64],
    cur: &Eval,
    p: &[f64],
    a_init: f64,
) -> Option<(f64, Eval)> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let d0 = dot(&cur.g, p);
    if !(d0 < 0.0) {
        return None;
    }
    let phi = |a: f64| {
        let e = evaluate(f, &axpy(x, a, p), eps);
        let d = if e.f.is_finite() { dot(&e.g, p) } else { f64::NAN };
        (e, d)
    };

    let zoom = |mut lo: f64, mut f_lo: f64, mut d_lo: f64, mut hi: f64, mut f_hi: f64| -> Option<(f64, Eval)> {
        for _ in 0..40 {
            // Quadratic interpolation from (lo, f_lo, d_lo) and (hi, f_hi),
            // safeguarded to the central part of the bracket.
            let span = hi - lo;
            let mut a = if f_hi.is_finite() {
                let denom = 2.0 * (f_hi - f_lo - d_lo * span);
                if denom > 0.0 {
                    lo - d_lo * span * span / denom
                } else {
                    lo + 0.5 * span
                }
            } else {
                lo + 0.1 * span
            };
            let (a_min, a_max) = if span > 0.0 {
                (lo + 0.1 * span, lo + 0.9 * span)
            } else {
                (lo + 0.9 * span, lo + 0.1 * span)
            };
            if !(a >= a_min && a <= a_max) {
                a = lo + 0.5 * span;
            }
            let (e, d) = phi(a);
            if !e.f.is_finite() || e.f > cur.f + C1 * a * d0 || e.f >= f_lo {
                hi = a;
                f_hi = e.f;
            } else {
                if d.abs() <= -C2 * d0 {
                    return Some((a, e));
                }
                if d * (hi - lo) >= 0.0 {
                    hi = lo;
                    f_hi = f_lo;
                }
                lo = a;
                f_lo = e.f;
                d_lo = d;
            }
            if (hi - lo).abs() < 1e-16 * lo.abs().max(1.0) {
                break;
            }
        }
        // Accept any decrease found.
        if lo > 0.0 {
            let (e, _) = phi(lo);
            if e.f < cur.f {
                return Some((lo, e));
            }
        }
        None
    };

    let mut a_prev = 0.0;
    let mut f_prev = cur.f;
    let mut d_prev = d0;
    let mut a = a_init;
    for i in 0..30 {
        let (e, d) = phi(a);
        if !e.f.is_finite() || e.f > cur.f + C1 * a * d0 || (i > 0 && e.f >= f_prev) {
            return zoom(a_prev, f_prev, d_prev, a, e.f);
        }
        if d.abs() <= -C2 * d0 {
            return Some((a, e));
        }
        if d >= 0.0 {
            return zoom(a, e.f, d, a_prev, f_prev);
        }
        a_prev = a;
        f_prev = e.f;
        d_prev = d;
        a *= 2.0;
    }
    None
}

fn lbfgs_direction(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Attempt {
    x: Vec<f64>,
    cur: Eval,
    lbfgs_iterations: usize,
    newton_iterations: usize,
    trace: Vec<f64>,
    hessian: Option<DMatrix<f64>>,
}

fn lbfgs_phase<F: ScalarField>(f: &F, eps: &[f64], at: &mut Attempt, opts: &OptimizeOptions) {
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.lbfgs_memory);
    while at.lbfgs_iterations < opts.max_lbfgs_iter {
        let gn = inf_norm(&at.cur.g);
        if gn <= opts.grad_tol.max(opts.newton_switch_tol) {
            return;
        }
        let mut p = lbfgs_direction(&at.cur.g, &hist);
        if !(dot(&p, &at.cur.g) < 0.0) {
            hist.clear();
            p = at.cur.g.iter().map(|v| -v).collect();
        }
        let a_init = if hist.is_empty() {
            (1.0 / p.iter().map(|v| v * v).sum::<f64>().sqrt()).min(1.0)
        } else {
            1.0
        };
        let Some((a, next)) = wolfe_search(f, eps, &at.x, &at.cur, &p, a_init) else {
            if hist.is_empty() {
                return;
            }
            hist.clear();
            continue;
        };
        let x_new = axpy(&at.x, a, &p);
        let s: Vec<f64> = x_new.iter().zip(&at.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&at.cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if hist.len() == opts.lbfgs_memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        at.x = x_new;
        at.cur = next;
        at.trace.push(at.cur.f);
        at.lbfgs_iterations += 1;
    }
}

/// Newton steps on the exact Hessian; returns the Hessian at the final point.
fn newton_phase<F: ScalarField>(f: &F, eps: &[f64], at: &mut Attempt, opts: &OptimizeOptions) -> Result<()> {
    loop {
        let h = diff::hessian(f, &at.x, eps)?;
        let gn = inf_norm(&at.cur.g);
        if gn <= opts.grad_tol || at.newton_iterations >= opts.max_newton_iter {
            at.hessian = Some(h);
            return Ok(());
        }
        let g = DVector::from_column_slice(&at.cur.g);
        let scale = h.diagonal().amax().max(1.0);
        let mut shift = 0.0;
        let p = loop {
            let shifted = &h + DMatrix::identity(h.nrows(), h.ncols()) * shift;
            if let Some(c) = shifted.cholesky() {
                break -c.solve(&g);
            }
            shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
            if shift > 1e8 * scale {
                at.hessian = Some(h);
                return Ok(());
            }
        };
        let p: Vec<f64> = p.iter().copied().collect();
        let slope = dot(&at.cur.g, &p);
        let roundoff = 16.0 * f64::EPSILON * at.cur.f.abs().max(1.0);
        if -slope < roundoff {
            // The predicted decrease is below the rounding error in f, so
            // compare gradients instead. Such steps are not traced.
            let e = evaluate(f, &axpy(&at.x, 1.0, &p), eps);
            if e.f.is_finite() && e.f <= at.cur.f + roundoff && inf_norm(&e.g) < 0.5 * gn {
                at.x = axpy(&at.x, 1.0, &p);
                at.cur = e;
                at.newton_iterations += 1;
                continue;
            }
        }
        let traced = at.trace.last().copied().unwrap_or(f64::INFINITY);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let e = evaluate(f, &axpy(&at.x, step, &p), eps);
            if e.f.is_finite() && e.f <= at.cur.f.min(traced) && (e.f <= at.cur.f + 1e-4 * step * slope || inf_norm(&e.g) < gn) {
                accepted = Some(e);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            at.hessian = Some(h);
            return Ok(());
        };
        at.x = axpy(&at.x, step, &p);
        at.cur = next;
        at.trace.push(at.cur.f);
        at.newton_iterations += 1;
    }
}

/// Smallest eigenvalue of a symmetric matrix, or `-inf` if it does not
/// Cholesky-factorize.
pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    if h.clone().cholesky().is_none() {
        let eig = h.clone().symmetric_eigenvalues();
        return eig.min().min(0.0).min(-f64::MIN_POSITIVE);
    }
    h.clone().symmetric_eigenvalues().min()
}

/// Minimizes `f(·, eps)` from `x0`.
pub fn minimize<F: ScalarField>(f: &F, x0: &[f64], eps: &[f64], opts: &OptimizeOptions) -> Result<MinimizeResult> {
    if x0.len() != f.n_params() {
        return Err(Error::Dimension {
            expected: f.n_params(),
            got: x0.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start = x0.to_vec();
    let mut restarts = 0;
    loop {
        let cur = evaluate(f, &start, eps);
        if !cur.f.is_finite() {
            return Err(Error::domain("objective is not finite at the initial point"));
        }
        let mut at = Attempt {
            x: start.clone(),
            trace: vec![cur.f],
            cur,
            lbfgs_iterations: 0,
            newton_iterations: 0,
            hessian: None,
        };
        lbfgs_phase(f, eps, &mut at, opts);
        newton_phase(f, eps, &mut at, opts)?;
        let h = at.hessian.take().expect("newton phase stores the final Hessian");
        let grad_norm = inf_norm(&at.cur.g);
        let min_eig = min_eigenvalue(&h);
        debug!(
            "attempt {restarts}: f={} |g|={grad_norm:.3e} min_eig={min_eig:.3e} lbfgs={} newton={}",
            at.cur.f, at.lbfgs_iterations, at.newton_iterations
        );
        let converged = grad_norm <= opts.grad_tol && min_eig > 0.0;
        let saddle = grad_norm <= opts.grad_tol && min_eig <= 0.0;
        if converged || !saddle || restarts >= opts.max_restarts {
            return Ok(MinimizeResult {
                x: at.x,
                value: at.cur.f,
                grad_norm,
                hessian_min_eig: min_eig,
                lbfgs_iterations: at.lbfgs_iterations,
                newton_iterations: at.newton_iterations,
                restarts,
                converged,
                trace: at.trace,
            });
        }
        restarts += 1;
        start = at
            .x
            .iter()
            .map(|v| v + opts.restart_noise * rng.gen_range(-1.0..1.0))
            .collect();
    }
}

/// A fitted variational optimum.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub eta_opt: GlobalParams,
    pub prior: StickPriorSpec,
    pub kl_value: f64,
    pub grad_norm: f64,
    pub hessian_min_eig: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

pub fn optimize(
    init: &GlobalParams,
    data: &Dataset,
    model: &ModelSpec,
    pert: &StickPriorSpec,
    opts: &OptimizeOptions,
) -> Result<FitResult> {
    let obj = KlObjective::new(data, model, pert.clone())?;
    if init.layout != obj.layout() {
        return Err(Error::Dimension {
            expected: obj.layout().len(),
            got: init.layout.len(),
        });
    }
    let r = minimize(&obj, &init.flatten(), &[0.0, 0.0], opts)?;
    Ok(FitResult {
        eta_opt: GlobalParams::unflatten(init.layout, &r.x)?,
        prior: pert.clone(),
        kl_value: r.value,
        grad_norm: r.grad_norm,
        hessian_min_eig: r.hessian_min_eig,
        iterations: r.iterations(),
        restarts: r.restarts,
        converged: r.converged,
        trace: r.trace,
    })
}

/// k-means++ seeding followed by Lloyd iterations. Returns the centers and
/// the hard assignment of every point.
pub fn kmeans(data: &Dataset, groups: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = data.n();
    let groups = groups.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = data.points().map(|p| sq(p, data.point(chosen[0]))).collect();
    while chosen.len() < groups {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            if dist[pick] == 0.0 {
                dist.iter().rposition(|&d| d > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in data.points().enumerate() {
            dist[i] = dist[i].min(sq(p, data.point(next)));
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| data.point(i).to_vec()).collect();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in data.points().enumerate() {
            let best = (0..groups)
                .min_by(|&a, &b| sq(p, &centers[a]).total_cmp(&sq(p, &centers[b])))
                .unwrap_or(0);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (g, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = (0..n).filter(|&i| assign[i] == g).map(|i| data.point(i)).collect();
            if members.is_empty() {
                continue;
            }
            for (j, c) in center.iter_mut().enumerate() {
                *c = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    (centers, assign)
}

/// Seeds `η_θ` from a hard clustering into `min(K, N)` groups, ordered by
/// decreasing size so the stick-breaking weights start near the empirical
/// cluster masses.
pub fn initialize(data: &Dataset, model: &ModelSpec, seed: u64) -> Result<GlobalParams> {
    initialize_with_groups(data, model, model.layout().k, seed)
}

/// As [`initialize`], seeding at most `groups` components from the hard
/// clustering; the rest start at the prior mode with little stick mass.
pub fn initialize_with_groups(data: &Dataset, model: &ModelSpec, groups: usize, seed: u64) -> Result<GlobalParams> {
    let layout = model.layout();
    if data.dim() != layout.d {
        return Err(Error::Dimension {
            expected: layout.d,
            got: data.dim(),
        });
    }
    let d = layout.d;
    let groups = groups.clamp(1, layout.k.min(data.n()));
    let (centers, assign) = kmeans(data, groups, seed);
    let mut sizes: Vec<(usize, usize)> = (0..groups)
        .map(|g| (assign.iter().filter(|&&a| a == g).count(), g))
        .collect();
    sizes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut eta = GlobalParams::zeros(layout);
    let niw = &model.niw;
    for (k, &(size, g)) in sizes.iter().enumerate() {
        // Conjugate posterior mode of Σ given the hard assignment: the
        // within-cluster scatter shrunk towards the prior scale matrix.
        let mut scatter = niw.scale_matrix.clone();
        for (i, p) in data.points().enumerate() {
            if assign[i] == g {
                for a in 0..d {
                    for b in 0..d {
                        scatter[(a, b)] += (p[a] - centers[g][a]) * (p[b] - centers[g][b]);
                    }
                }
            }
        }
        let m = size as f64;
        let shrink = niw.mean_scale * m / (niw.mean_scale + m);
        for a in 0..d {
            for b in 0..d {
                scatter[(a, b)] += shrink * (centers[g][a] - niw.prior_mean[a]) * (centers[g][b] - niw.prior_mean[b]);
            }
        }
        let cov = scatter / (m + niw.dof + d as f64 + 2.0);
        eta.set_cluster(k, &centers[g], &cov)?;
    }
    let mode = model.niw.mode();
    for k in groups..layout.k {
        eta.set_cluster(k, mode.mean.as_slice(), &mode.covariance)?;
    }
    let n = data.n() as f64;
    let mut remaining = 1.0;
    for i in 0..layout.n_sticks() {
        let mass = sizes.get(i).map_or(0.0, |s| s.0 as f64 / n);
        let nu = if remaining > 0.0 { mass / remaining } else { 0.0 };
        let nu = nu.clamp(1e-3, 1.0 - 1e-3);
        eta.stick_loc[i] = (nu / (1.0 - nu)).ln();
        eta.stick_log_scale[i] = 0.0;
        remaining = (remaining - mass).max(0.0);
    }
    Ok(eta)
}
