//! Quadrature rules: Gauss–Hermite for expectations under a normal, and
//! tanh–sinh for integrals over the unit interval with endpoint singularities.

use crate::error::{Error, Result};

/// Gauss–Hermite rule normalized for a standard normal:
/// `E[f(Z)] ≈ Σ weights[i] · f(nodes[i])`, `Z ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::domain(format!("need at least 2 quadrature nodes, got {n}")));
        }
        let (x, w) = physicists_rule(n);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        Ok(GaussHermite {
            nodes: x.iter().map(|t| t * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|w| w / sqrt_pi).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(loc + scale·Z)]`.
    pub fn expect(&self, loc: f64, scale: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * f(loc + scale * z))
            .sum()
    }
}

/// Nodes and weights for `∫ e^{-t²} f(t) dt` by Newton iteration on the
/// orthonormal Hermite recurrence.
fn physicists_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Ascending order.
    x.reverse();
    w.reverse();
    (x, w)
}

/// `∫₀¹ f(ν, 1−ν) dν` by tanh–sinh with level doubling. The integrand receives
/// both `ν` and its complement, each computed without cancellation, so
/// singularities like `(1−ν)^{-1/2}` are handled.
pub fn integrate_unit(f: impl Fn(f64, f64) -> f64, abs_tol: f64) -> Result<f64> {
    const T_MAX: f64 = 6.5;
    const MAX_LEVEL: u32 = 14;
    let half_pi = std::f64::consts::FRAC_PI_2;

    let node = |t: f64| -> Result<f64> {
        let u = half_pi * t.sinh();
        let lo = 1.0 / (1.0 + (2.0 * u).exp()); // 1 − ν for t ≥ 0
        let hi = 1.0 / (1.0 + (-2.0 * u).exp());
        let cu = u.cosh();
        let dx = 0.5 * half_pi * t.cosh() / (cu * cu);
        if !(dx > 0.0) || hi == 0.0 || lo == 0.0 {
            return Ok(0.0);
        }
        let v = f(hi, lo) * dx;
        if !v.is_finite() {
            return Err(Error::Quadrature(format!("non-finite integrand at node ν = {hi}")));
        }
        Ok(v)
    };
    let sym = |t: f64| -> Result<f64> {
        if t == 0.0 {
            node(0.0)
        } else {
            Ok(node(t)? + node(-t)?)
        }
    };

    let mut h = 1.0;
    let mut sum = 0.0;
    let mut k = 0.0;
    while k * h <= T_MAX {
        sum += sym(k * h)?;
        k += 1.0;
    }
    let mut estimate = sum * h;
    for _ in 0..MAX_LEVEL {
        h *= 0.5;
        let mut t = h;
        while t <= T_MAX {
            sum += sym(t)?;
            t += 2.0 * h;
        }
        let next = sum * h;
        if (next - estimate).abs() <= abs_tol.max(1e-15 * next.abs()) {
            return Ok(next);
        }
        estimate = next;
    }
    Err(Error::Quadrature(format!(
        "tanh-sinh did not reach tolerance {abs_tol} after {MAX_LEVEL} levels"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_integrates_normal_moments() {
        for n in [2usize, 5, 30, 100] {
            let gh = GaussHermite::new(n).unwrap();
            let total: f64 = gh.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-13, "n={n} sum={total}");
            let var = gh.expect(0.0, 1.0, |z| z * z);
            assert!((var - 1.0).abs() < 1e-12, "n={n}");
            assert!(gh.nodes.windows(2).all(|w| w[0] < w[1]));
        }
        let gh = GaussHermite::new(30).unwrap();
        assert!((gh.expect(0.0, 1.0, |z| z.powi(4)) - 3.0).abs() < 1e-11);
        // E[exp(Z)] = e^{1/2}
        assert!((gh.expect(0.0, 1.0, f64::exp) - 0.5f64.exp()).abs() < 1e-13);
    }

    #[test]
    fn hermite_rejects_tiny_rules() {
        assert!(GaussHermite::new(1).is_err());
    }

    #[test]
    fn tanh_sinh_handles_endpoint_singularities() {
        let v = integrate_unit(|x, _| x * x, 1e-12).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        // ∫ (1−ν)^{-1/2} = 2
        let v = integrate_unit(|_, c| c.powf(-0.5), 1e-10).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "{v}");
        // ∫ ν^{-0.9} = 10
        let v = integrate_unit(|x, _| x.powf(-0.9), 1e-10).unwrap();
        assert!((v - 10.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn tanh_sinh_reports_non_finite_integrand() {
        assert!(integrate_unit(|_, _| f64::NAN, 1e-10).is_err());
    }
}
