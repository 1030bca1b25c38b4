//! Cluster-count summaries of a variational optimum.
//!
//! A cluster counts when strictly more than `t` points fall in it, so `t = 0`
//! is the number of distinct clusters. In-sample counts draw assignments from
//! the optimal responsibilities; predictive counts draw sticks from `q(ν)` and
//! evaluate the binomial tail for `n_new` hypothetical points.
//!
//! Monte Carlo draw `i` always uses stream `i` of a ChaCha generator seeded
//! with the query seed, and draws are reduced in index order, so estimates do
//! not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::model::{Dataset, StickPoint};
use crate::variational::{optimal_responsibilities, GlobalParams, ModelSpec, Responsibilities};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    InSample,
    Predictive,
}

impl CountMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CountMode::InSample => "in_sample",
            CountMode::Predictive => "predictive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "in_sample" => Some(CountMode::InSample),
            "predictive" => Some(CountMode::Predictive),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMethod {
    MonteCarlo,
    /// Exact expectation over assignments; in-sample only.
    ClosedForm,
}

impl CountMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CountMethod::MonteCarlo => "monte_carlo",
            CountMethod::ClosedForm => "closed_form",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "monte_carlo" => Some(CountMethod::MonteCarlo),
            "closed_form" => Some(CountMethod::ClosedForm),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCountQuery {
    pub threshold: usize,
    pub mode: CountMode,
    /// Size of the hypothetical dataset (predictive only).
    pub n_new: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub method: CountMethod,
}

impl ClusterCountQuery {
    pub const DEFAULT_N_MC: usize = 1000;

    pub fn in_sample(threshold: usize) -> Self {
        ClusterCountQuery {
            threshold,
            mode: CountMode::InSample,
            n_new: 0,
            n_mc: Self::DEFAULT_N_MC,
            seed: 0,
            method: CountMethod::MonteCarlo,
        }
    }

    pub fn predictive(threshold: usize, n_new: usize) -> Self {
        ClusterCountQuery {
            mode: CountMode::Predictive,
            n_new,
            ..Self::in_sample(threshold)
        }
    }

    pub fn with_mc(mut self, n_mc: usize, seed: u64) -> Self {
        self.n_mc = n_mc;
        self.seed = seed;
        self
    }

    pub fn closed_form(mut self) -> Self {
        self.method = CountMethod::ClosedForm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be at least 1".into()));
        }
        if self.mode == CountMode::Predictive {
            if self.n_new == 0 {
                return Err(Error::Config("n_new must be at least 1".into()));
            }
            if self.method == CountMethod::ClosedForm {
                return Err(Error::Config("predictive counts are only available by Monte Carlo".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountEstimate {
    pub value: f64,
    pub mc_stderr: f64,
    pub method: CountMethod,
}

/// `Σ_k (1 − Π_n (1 − r_nk))`.
pub fn distinct_clusters_closed(r: &Responsibilities) -> f64 {
    (0..r.k())
        .map(|k| 1.0 - r.r.column(k).iter().map(|p| 1.0 - p).product::<f64>())
        .sum()
}

/// `Σ_k P(count_k > t)` with independent assignments, via the Poisson-binomial
/// recursion over points.
pub fn thresholded_clusters_closed(r: &Responsibilities, t: usize) -> f64 {
    if t == 0 {
        return distinct_clusters_closed(r);
    }
    let mut total = 0.0;
    for k in 0..r.k() {
        // probs[c] = P(count = c) for c ≤ t.
        let mut probs = vec![0.0; t + 1];
        probs[0] = 1.0;
        for &p in r.r.column(k).iter() {
            for c in (1..=t).rev() {
                probs[c] = probs[c] * (1.0 - p) + probs[c - 1] * p;
            }
            probs[0] *= 1.0 - p;
        }
        total += (1.0 - probs.iter().sum::<f64>()).max(0.0);
    }
    total
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    rng
}

fn summarize(samples: &[f64]) -> CountEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let stderr = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    CountEstimate {
        value: mean,
        mc_stderr: stderr,
        method: CountMethod::MonteCarlo,
    }
}

/// Draws `z_n ~ r_n` independently `n_mc` times and averages the number of
/// clusters holding more than `t` points.
pub fn clusters_from_responsibilities_mc(r: &Responsibilities, t: usize, n_mc: usize, seed: u64) -> CountEstimate {
    let (n, k) = (r.n(), r.k());
    let cumulative: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            (0..k)
                .map(|j| {
                    acc += r.r[(i, j)];
                    acc
                })
                .collect()
        })
        .collect();
    let samples: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|d| {
            let mut rng = draw_rng(seed, d);
            let mut counts = vec![0usize; k];
            for row in &cumulative {
                let u = rng.gen::<f64>() * row[k - 1];
                let z = row.iter().position(|&c| u < c).unwrap_or(k - 1);
                counts[z] += 1;
            }
            counts.iter().filter(|&&c| c > t).count() as f64
        })
        .collect();
    summarize(&samples)
}

pub fn clusters_mc(eta: &GlobalParams, data: &Dataset, model: &ModelSpec, query: &ClusterCountQuery) -> Result<CountEstimate> {
    query.validate()?;
    if query.mode != CountMode::InSample {
        return Err(Error::Config("clusters_mc expects an in-sample query".into()));
    }
    let r = optimal_responsibilities(eta, data, model)?;
    Ok(match query.method {
        CountMethod::MonteCarlo => clusters_from_responsibilities_mc(&r, query.threshold, query.n_mc, query.seed),
        CountMethod::ClosedForm => CountEstimate {
            value: thresholded_clusters_closed(&r, query.threshold),
            mc_stderr: 0.0,
            method: CountMethod::ClosedForm,
        },
    })
}

/// Log mixture weights from sampled stick logits; the last stick is one.
fn log_weights_from_logits(logits: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len() + 1);
    let mut rest = 0.0;
    for &x in logits {
        let p = StickPoint::from_logit(x);
        out.push(rest + p.ln_nu);
        rest += p.ln_one_minus_nu;
    }
    out.push(rest);
    out
}

/// `1 − Σ_{i ≤ t} C(n, i) πⁱ (1 − π)^{n − i}` evaluated from `ln π`.
pub fn binomial_upper_tail(log_pi: f64, n: usize, t: usize) -> f64 {
    if t >= n {
        return 0.0;
    }
    if log_pi == f64::NEG_INFINITY {
        return 0.0;
    }
    let pi = log_pi.exp();
    let log_1m = if pi < 0.5 { (-pi).ln_1p() } else { (1.0 - pi).ln() };
    let lower: f64 = (0..=t)
        .map(|i| {
            let lc = ln_binomial(n as u64, i as u64);
            let a = if i == 0 { 0.0 } else { i as f64 * log_pi };
            let b = if i == n { 0.0 } else { (n - i) as f64 * log_1m };
            (lc + a + b).exp()
        })
        .sum();
    (1.0 - lower).clamp(0.0, 1.0)
}

/// Expected number of clusters with more than `t` of `n_new` new points,
/// averaging the binomial tail over stick draws from `q(ν)`.
pub fn clusters_predictive(eta: &GlobalParams, query: &ClusterCountQuery) -> Result<CountEstimate> {
    query.validate()?;
    if query.mode != CountMode::Predictive {
        return Err(Error::Config("clusters_predictive expects a predictive query".into()));
    }
    let n_sticks = eta.layout.n_sticks();
    let samples: Vec<f64> = (0..query.n_mc)
        .into_par_iter()
        .map(|d| {
            let mut rng = draw_rng(query.seed, d);
            let logits: Vec<f64> = (0..n_sticks)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    eta.stick_loc[i] + eta.stick_scale(i) * z
                })
                .collect();
            log_weights_from_logits(&logits)
                .into_iter()
                .map(|lp| binomial_upper_tail(lp, query.n_new, query.threshold))
                .sum()
        })
        .collect();
    Ok(summarize(&samples))
}

/// Draws sticks as in [`clusters_predictive`] and then simulates the `n_new`
/// categorical assignments directly instead of using the binomial formula.
pub fn clusters_predictive_simulated(eta: &GlobalParams, query: &ClusterCountQuery) -> Result<CountEstimate> {
    query.validate()?;
    let n_sticks = eta.layout.n_sticks();
    let samples: Vec<f64> = (0..query.n_mc)
        .into_par_iter()
        .map(|d| {
            let mut rng = draw_rng(query.seed, d);
            let logits: Vec<f64> = (0..n_sticks)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    eta.stick_loc[i] + eta.stick_scale(i) * z
                })
                .collect();
            let weights: Vec<f64> = log_weights_from_logits(&logits).iter().map(|l| l.exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut counts = vec![0usize; weights.len()];
            for _ in 0..query.n_new {
                let mut u = rng.gen::<f64>() * total;
                let mut z = weights.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    if u < *w {
                        z = k;
                        break;
                    }
                    u -= w;
                }
                counts[z] += 1;
            }
            counts.iter().filter(|&&c| c > query.threshold).count() as f64
        })
        .collect();
    Ok(summarize(&samples))
}

/// The posterior summary as a function of `η_θ`. Works the same whether `eta`
/// is a refit optimum or a linear extrapolation.
pub fn g_of_eta(eta: &GlobalParams, data: &Dataset, model: &ModelSpec, query: &ClusterCountQuery) -> Result<CountEstimate> {
    match query.mode {
        CountMode::InSample => clusters_mc(eta, data, model, query),
        CountMode::Predictive => clusters_predictive(eta, query),
    }
}
