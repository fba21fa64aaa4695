//! Variational EM over all genes with empirical-Bayes estimation of the
//! shared gamma prior on the shrinkage precisions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::{build_problem, ExpressionMatrix};
use crate::error::{Error, Result};
use crate::vb::{shape_tau, FitOptions, HyperParameters, PreparedProblem, VariationalPosterior};

/// Upper limit on the estimated prior shape.
pub const A_MAX: f64 = 1e4;

/// Bracket values at or below this are treated as zero dispersion.
pub const DEGENERATE_GAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EbMethod {
    /// Closed form from `psi(x) ~ log(x) - 1/(2x)`.
    Approx,
    /// Root of the exact stationarity condition.
    Exact,
}

impl std::str::FromStr for EbMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approx" => Ok(EbMethod::Approx),
            "exact" => Ok(EbMethod::Exact),
            other => Err(Error::Config(format!("unknown EB method '{other}' (expected approx or exact)"))),
        }
    }
}

/// Neumaier-compensated sum in slice order.
pub(crate) fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `(E[tau^-2], E[log tau^-2])` for each gamma factor `Gamma(a_star, b_j)`.
pub fn gamma_moments(a_star: f64, b_stars: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let psi = digamma(a_star);
    let e = b_stars.iter().map(|b| a_star / b).collect();
    let e_log = b_stars.iter().map(|b| psi - b.ln()).collect();
    (e, e_log)
}

/// `sum_j E[log p_{a,b}(tau_j^-2)]`, the part of the summed bound that
/// depends on the hyperparameters.
pub fn eb_objective(a: f64, b: f64, e_tau: &[f64], e_log_tau: &[f64]) -> f64 {
    let p = e_tau.len() as f64;
    p * (a * b.ln() - ln_gamma(a)) + (a - 1.0) * stable_sum(e_log_tau.iter().copied()) - b * stable_sum(e_tau.iter().copied())
}

/// `log(mean E[tau^-2]) - mean E[log tau^-2]`; non-negative by Jensen.
fn dispersion(e_tau: &[f64], e_log_tau: &[f64]) -> f64 {
    let p = e_tau.len() as f64;
    (stable_sum(e_tau.iter().copied()) / p).ln() - stable_sum(e_log_tau.iter().copied()) / p
}

fn rate_for(a: f64, e_tau: &[f64]) -> f64 {
    a * e_tau.len() as f64 / stable_sum(e_tau.iter().copied())
}

pub fn eb_update_approx_from_moments(e_tau: &[f64], e_log_tau: &[f64]) -> (f64, f64) {
    let gap = dispersion(e_tau, e_log_tau);
    let a = if gap <= DEGENERATE_GAP {
        A_MAX
    } else {
        (0.5 / gap).min(A_MAX)
    };
    (a, rate_for(a, e_tau))
}

/// Maximizes the exact objective: `b = a p / sum E[tau^-2]` and
/// `log a - psi(a) = dispersion`, solved by bisection in `log a`.
pub fn eb_update_fixedpoint_from_moments(e_tau: &[f64], e_log_tau: &[f64]) -> (f64, f64) {
    let gap = dispersion(e_tau, e_log_tau);
    let excess = |log_a: f64| {
        let a = log_a.exp();
        log_a - digamma(a) - gap
    };
    // log a - psi(a) decreases from +inf to 0
    let mut hi = A_MAX.ln();
    let a = if gap <= DEGENERATE_GAP || excess(hi) >= 0.0 {
        A_MAX
    } else {
        let mut lo = -30.0_f64;
        while excess(lo) <= 0.0 {
            lo -= 30.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        (0.5 * (lo + hi)).exp()
    };
    (a, rate_for(a, e_tau))
}

pub fn eb_update_approx(a_star: f64, b_stars: &[f64]) -> (f64, f64) {
    let (e, e_log) = gamma_moments(a_star, b_stars);
    eb_update_approx_from_moments(&e, &e_log)
}

pub fn eb_update_fixedpoint(a_star: f64, b_stars: &[f64]) -> (f64, f64) {
    let (e, e_log) = gamma_moments(a_star, b_stars);
    eb_update_fixedpoint_from_moments(&e, &e_log)
}

pub fn eb_update(method: EbMethod, a_star: f64, b_stars: &[f64]) -> (f64, f64) {
    match method {
        EbMethod::Approx => eb_update_approx(a_star, b_stars),
        EbMethod::Exact => eb_update_fixedpoint(a_star, b_stars),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop when every gene's bound moves by less than this between iterations.
    pub tol: f64,
    pub max_iter: usize,
    /// `false` keeps `(a, b)` at their initial values and fits genes independently.
    pub global_shrinkage: bool,
    pub eb_method: EbMethod,
    /// Starting `(a, b)`.
    pub initial_a: f64,
    pub initial_b: f64,
    /// Fixed prior on the noise precision.
    pub c: f64,
    pub d: f64,
    /// Starting `b*_j` and `d*_j`.
    pub initial_rate: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 1000,
            global_shrinkage: true,
            eb_method: EbMethod::Approx,
            initial_a: 0.001,
            initial_b: 0.001,
            c: 0.001,
            d: 0.001,
            initial_rate: 0.001,
        }
    }
}

impl EmConfig {
    pub fn no_shrink() -> Self {
        Self {
            global_shrinkage: false,
            ..Self::default()
        }
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            initial_rate: self.initial_rate,
        }
    }

    fn initial_hyper(&self) -> Result<HyperParameters> {
        HyperParameters::new(self.initial_a, self.initial_b, self.c, self.d)
    }
}

/// Result of fitting every gene's regression.
#[derive(Debug, Clone)]
pub struct SemFit {
    pub gene_ids: Vec<String>,
    pub posteriors: Vec<VariationalPosterior>,
    /// Prior under which `posteriors` were last updated.
    pub hyper: HyperParameters,
    /// Per-gene lower bound after each iteration.
    pub lower_bounds: Vec<Vec<f64>>,
    /// Mean of the per-gene bounds after each iteration.
    pub mean_lower_bound: Vec<f64>,
    /// `(a, b)` used in each iteration.
    pub hyper_history: Vec<(f64, f64)>,
    pub em_iterations: usize,
    pub converged: bool,
    pub global_shrinkage: bool,
}

impl SemFit {
    pub fn n_genes(&self) -> usize {
        self.posteriors.len()
    }
}

pub(crate) fn prepare_all(m: &ExpressionMatrix) -> Result<Vec<PreparedProblem>> {
    (0..m.n_genes())
        .into_par_iter()
        .map(|j| {
            build_problem(m, j)
                .and_then(|prob| PreparedProblem::new(&prob))
                .map_err(|e| e.for_gene(&m.gene_ids()[j]))
        })
        .collect()
}

/// Fits all `p` equations. With global shrinkage each iteration makes one
/// coordinate-ascent pass per gene under the current `(a, b)` and then
/// re-estimates `(a, b)`; without it each gene is fit to convergence under the
/// fixed initial prior.
pub fn fit_sem(m: &ExpressionMatrix, config: &EmConfig) -> Result<SemFit> {
    if m.n_samples() < 3 {
        return Err(Error::Validation(format!("need at least 3 samples, found {}", m.n_samples())));
    }
    let opts = config.fit_options();
    opts.validate()?;
    let hp0 = config.initial_hyper()?;
    let problems = prepare_all(m)?;
    let genes = m.gene_ids();

    if !config.global_shrinkage {
        let posteriors: Vec<VariationalPosterior> = problems
            .par_iter()
            .enumerate()
            .map(|(j, prep)| prep.fit(&hp0, &opts).map_err(|e| e.for_gene(&genes[j])))
            .collect::<Result<_>>()?;
        let em_iterations = posteriors.iter().map(|v| v.iterations).max().unwrap_or(0);
        let lower_bounds: Vec<Vec<f64>> = posteriors.iter().map(|v| v.history.clone()).collect();
        let mean_lower_bound = (0..em_iterations)
            .map(|t| {
                stable_sum(lower_bounds.iter().map(|h| h[t.min(h.len() - 1)])) / lower_bounds.len() as f64
            })
            .collect();
        return Ok(SemFit {
            gene_ids: genes.to_vec(),
            converged: posteriors.iter().all(|v| v.converged),
            posteriors,
            hyper: hp0,
            lower_bounds,
            mean_lower_bound,
            hyper_history: vec![(hp0.a, hp0.b); em_iterations],
            em_iterations,
            global_shrinkage: false,
        });
    }

    // The first sweep runs with a* = a(0); afterwards each sweep sees the
    // shape set from the hyperparameters of the iteration before.
    let mut hp = hp0;
    let mut states: Vec<VariationalPosterior> = problems
        .iter()
        .map(|prep| {
            let mut s = prep.initial_state(&hp, config.initial_rate);
            s.a_star = hp.a;
            s
        })
        .collect();
    let mut lower_bounds: Vec<Vec<f64>> = vec![Vec::new(); problems.len()];
    let mut mean_lower_bound = Vec::new();
    let mut hyper_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=config.max_iter {
        iterations = t;
        hyper_history.push((hp.a, hp.b));
        // E-step: one pass per gene, then the shape update from a(t-1)
        states
            .par_iter_mut()
            .zip(problems.par_iter())
            .enumerate()
            .try_for_each(|(j, (state, prep))| {
                prep.sweep(state, &hp).map_err(|e| e.for_gene(&genes[j]))?;
                state.iterations += 1;
                state.history.push(state.lower_bound);
                state.a_star = shape_tau(&hp, prep.prior_dim());
                Ok::<(), Error>(())
            })?;

        let mut max_delta: f64 = 0.0;
        for (hist, state) in lower_bounds.iter_mut().zip(states.iter()) {
            if let Some(&prev) = hist.last() {
                max_delta = max_delta.max((state.lower_bound - prev).abs());
            }
            hist.push(state.lower_bound);
        }
        mean_lower_bound.push(stable_sum(states.iter().map(|s| s.lower_bound)) / states.len() as f64);

        if t >= 2 && max_delta < config.tol {
            converged = true;
            break;
        }
        if t == config.max_iter {
            break;
        }

        // M-step; a* can differ between genes when their designs differ in rank
        let (e, e_log): (Vec<f64>, Vec<f64>) = states
            .iter()
            .map(|s| (s.a_star / s.b_star, digamma(s.a_star) - s.b_star.ln()))
            .unzip();
        let (a, b) = match config.eb_method {
            EbMethod::Approx => eb_update_approx_from_moments(&e, &e_log),
            EbMethod::Exact => eb_update_fixedpoint_from_moments(&e, &e_log),
        };
        if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
            return Err(Error::Numerical(format!("empirical Bayes update produced a={a}, b={b}")));
        }
        hp = hp.with_global(a, b);
    }

    // the recorded bounds belong to the sweep; the returned states carry the
    // updated shape, so their bound is re-evaluated under the final prior
    for s in states.iter_mut() {
        s.refresh_bound(&hp);
    }
    for s in states.iter_mut() {
        s.converged = converged;
    }
    Ok(SemFit {
        gene_ids: genes.to_vec(),
        posteriors: states,
        hyper: hp,
        lower_bounds,
        mean_lower_bound,
        hyper_history,
        em_iterations: iterations,
        converged,
        global_shrinkage: true,
    })
}
