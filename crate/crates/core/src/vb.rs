//! Mean-field variational Bayes for one regression equation
//!
//! The model for a response `y` (length n) on a design `X` (n x q) is
//!
//! ```text
//! y | beta, sigma   ~ N(X beta, sigma^2 I)
//! beta | sigma, tau ~ N(0, sigma^2 tau^2 I)
//! tau^-2            ~ Gamma(a, b)
//! sigma^-2          ~ Gamma(c, d)
//! ```
//!
//! and the approximation is `q(beta) q(tau^-2) q(sigma^-2)` with a Gaussian and
//! two gamma factors. Coordinate ascent updates the covariance, the mean, the
//! noise rate `d*` and the shrinkage rate `b*` in that order; the shapes `a*`
//! and `c*` are fixed by the counts.
//!
//! When `q >= n` the model is reparameterized as `y = F theta + e` with
//! `X = F V^T` (rank r) and `theta ~ N(0, sigma^2 tau^2 I_r)`, which is the
//! prior that `beta ~ N(0, sigma^2 tau^2 I_q)` induces on `theta = V^T beta`.
//! The likelihood depends on `beta` only through `theta`, so both models have
//! the same marginal likelihood; the shapes count `r` coefficients instead of
//! `q`, and `q(beta)` is the image of `q(theta)` under `V`. When `r = q` the
//! two parameterizations coincide.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::{back_transform, svd_reduce, RegressionProblem};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower limit applied to `b*` and `d*` after each update.
pub const RATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperParameters {
    /// Shape of the gamma prior on `tau^-2`.
    pub a: f64,
    /// Rate of the gamma prior on `tau^-2`.
    pub b: f64,
    /// Shape of the gamma prior on `sigma^-2`.
    pub c: f64,
    /// Rate of the gamma prior on `sigma^-2`.
    pub d: f64,
}

impl Default for HyperParameters {
    fn default() -> Self {
        Self {
            a: 0.001,
            b: 0.001,
            c: 0.001,
            d: 0.001,
        }
    }
}

impl HyperParameters {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let hp = Self { a, b, c, d };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_global(self, a: f64, b: f64) -> Self {
        Self { a, b, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Absolute change in the lower bound below which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting value of `b*` and `d*`.
    pub initial_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 1000,
            initial_rate: 0.001,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter < 2 {
            return Err(Error::Config(format!("max_iter must be at least 2, got {}", self.max_iter)));
        }
        if !(self.initial_rate > 0.0) {
            return Err(Error::Config("initial rate must be positive".into()));
        }
        Ok(())
    }
}

/// Covariance of `q(beta)`.
#[derive(Debug, Clone)]
pub enum PosteriorCovariance {
    Full(DMatrix<f64>),
    /// `V diag(theta_var) V^T`.
    Reduced {
        right_factors: DMatrix<f64>,
        theta_var: DVector<f64>,
    },
}

impl PosteriorCovariance {
    pub fn dim(&self) -> usize {
        match self {
            PosteriorCovariance::Full(s) => s.nrows(),
            PosteriorCovariance::Reduced { right_factors, .. } => right_factors.nrows(),
        }
    }

    /// Number of coefficients carrying the Gaussian prior: `q` or the rank `r`.
    pub fn prior_dim(&self) -> usize {
        match self {
            PosteriorCovariance::Full(s) => s.nrows(),
            PosteriorCovariance::Reduced { theta_var, .. } => theta_var.len(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            PosteriorCovariance::Full(s) => s.trace(),
            // V has orthonormal columns
            PosteriorCovariance::Reduced { theta_var, .. } => theta_var.sum(),
        }
    }

    /// Marginal variances of the coefficients.
    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            PosteriorCovariance::Full(s) => s.diagonal(),
            PosteriorCovariance::Reduced { right_factors, theta_var } => {
                let zero = DVector::zeros(theta_var.len());
                back_transform(&zero, &DMatrix::from_diagonal(theta_var), right_factors)
                    .expect("reduced covariance factors conform")
                    .1
            }
        }
    }

    /// Dense form; intended for small problems and tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            PosteriorCovariance::Full(s) => s.clone(),
            PosteriorCovariance::Reduced { right_factors: v, theta_var } => {
                v * DMatrix::from_diagonal(theta_var) * v.transpose()
            }
        }
    }
}

/// Variational posterior for one regression equation.
#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    pub beta_mean: DVector<f64>,
    pub covariance: PosteriorCovariance,
    pub a_star: f64,
    pub b_star: f64,
    pub c_star: f64,
    pub d_star: f64,
    /// Lower bound after the last sweep.
    pub lower_bound: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Lower bound after every sweep.
    pub history: Vec<f64>,
    n: usize,
    stats: SweepStats,
}

/// Quantities of the current `q(beta)` that the rate updates and the bound need.
#[derive(Debug, Clone, Copy, Default)]
struct SweepStats {
    /// `||y - X beta*||^2`
    rss: f64,
    /// `tr(X^T X Sigma*)`
    tr_xtx_cov: f64,
    /// `tr(Sigma*)`
    tr_cov: f64,
    /// `log |Sigma*|`
    log_det: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub e_tau2inv: f64,
    pub e_log_tau2inv: f64,
    pub e_sig2inv: f64,
    pub e_beta_sq: f64,
}

impl VariationalPosterior {
    /// Recomputes `lower_bound` from the cached sweep statistics, e.g. after
    /// the shape `a*` was changed outside a sweep.
    pub(crate) fn refresh_bound(&mut self, hp: &HyperParameters) {
        self.lower_bound = bound_from_stats(self, hp);
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_covariates(&self) -> usize {
        self.beta_mean.len()
    }

    /// Coefficients under the Gaussian prior; see [`PosteriorCovariance::prior_dim`].
    pub fn prior_dim(&self) -> usize {
        self.covariance.prior_dim()
    }

    pub fn beta_variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }

    pub fn e_tau2inv(&self) -> f64 {
        self.a_star / self.b_star
    }

    pub fn e_sig2inv(&self) -> f64 {
        self.c_star / self.d_star
    }

    pub fn e_beta_sq(&self) -> f64 {
        self.beta_mean.norm_squared() + self.covariance.trace()
    }
}

pub fn expected_moments(vp: &VariationalPosterior) -> Moments {
    Moments {
        e_tau2inv: vp.e_tau2inv(),
        e_log_tau2inv: digamma(vp.a_star) - vp.b_star.ln(),
        e_sig2inv: vp.e_sig2inv(),
        e_beta_sq: vp.e_beta_sq(),
    }
}

/// `a + k/2` for `k` coefficients under the prior.
pub fn shape_tau(hp: &HyperParameters, k: usize) -> f64 {
    hp.a + k as f64 / 2.0
}

/// `c + (n + k)/2`
pub fn shape_sigma(hp: &HyperParameters, n: usize, k: usize) -> f64 {
    hp.c + (n + k) as f64 / 2.0
}

#[derive(Debug, Clone)]
enum Basis {
    Direct {
        x: DMatrix<f64>,
        xtx: DMatrix<f64>,
        xty: DVector<f64>,
    },
    Reduced {
        f: DMatrix<f64>,
        v: DMatrix<f64>,
        d2: DVector<f64>,
        fty: DVector<f64>,
    },
}

/// A regression problem with its Gram matrix or SVD precomputed.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    y: DVector<f64>,
    n: usize,
    q: usize,
    basis: Basis,
}

impl PreparedProblem {
    /// Chooses the SVD basis when `q >= n`, the direct one otherwise.
    pub fn new(prob: &RegressionProblem) -> Result<Self> {
        if prob.n_covariates() >= prob.n_samples() {
            Self::reduced(prob)
        } else {
            Self::direct(prob)
        }
    }

    pub fn direct(prob: &RegressionProblem) -> Result<Self> {
        check_problem(prob)?;
        let x = prob.design.clone();
        let xtx = x.tr_mul(&x);
        let xty = x.tr_mul(&prob.response);
        Ok(Self {
            y: prob.response.clone(),
            n: prob.n_samples(),
            q: prob.n_covariates(),
            basis: Basis::Direct { x, xtx, xty },
        })
    }

    pub fn reduced(prob: &RegressionProblem) -> Result<Self> {
        check_problem(prob)?;
        let red = svd_reduce(prob)?;
        let d2 = red.singular_values.map(|s| s * s);
        let fty = red.reduced_design.tr_mul(&red.response);
        Ok(Self {
            y: prob.response.clone(),
            n: prob.n_samples(),
            q: prob.n_covariates(),
            basis: Basis::Reduced {
                f: red.reduced_design,
                v: red.right_factors,
                d2,
                fty,
            },
        })
    }

    pub fn is_reduced(&self) -> bool {
        matches!(self.basis, Basis::Reduced { .. })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_covariates(&self) -> usize {
        self.q
    }

    /// `q` on the direct basis, the rank of `X` on the SVD basis.
    pub fn prior_dim(&self) -> usize {
        match &self.basis {
            Basis::Direct { .. } => self.q,
            Basis::Reduced { d2, .. } => d2.len(),
        }
    }

    /// State before the first sweep: `beta* = 0`, rates at `initial_rate` and
    /// the covariance implied by the starting expectations.
    pub fn initial_state(&self, hp: &HyperParameters, initial_rate: f64) -> VariationalPosterior {
        let a_star = shape_tau(hp, self.prior_dim());
        let c_star = shape_sigma(hp, self.n, self.prior_dim());
        let prior_var = initial_rate * initial_rate / (a_star * c_star);
        let covariance = match &self.basis {
            Basis::Direct { .. } => PosteriorCovariance::Full(DMatrix::identity(self.q, self.q) * prior_var),
            Basis::Reduced { v, d2, .. } => PosteriorCovariance::Reduced {
                right_factors: v.clone(),
                theta_var: DVector::from_element(d2.len(), prior_var),
            },
        };
        VariationalPosterior {
            beta_mean: DVector::zeros(self.q),
            covariance,
            a_star,
            b_star: initial_rate,
            c_star,
            d_star: initial_rate,
            lower_bound: f64::NEG_INFINITY,
            iterations: 0,
            converged: false,
            history: Vec::new(),
            n: self.n,
            stats: SweepStats::default(),
        }
    }

    /// One coordinate-ascent pass: covariance, mean, `d*`, `b*`, each using
    /// the latest values of the other factors. Updates `lower_bound`.
    pub fn sweep(&self, state: &mut VariationalPosterior, hp: &HyperParameters) -> Result<()> {
        let e_tau = state.e_tau2inv();
        let e_sig = state.e_sig2inv();
        if !(e_tau.is_finite() && e_tau > 0.0 && e_sig.is_finite() && e_sig > 0.0) {
            return Err(Error::Numerical(format!(
                "invalid expectations E[tau^-2]={e_tau}, E[sigma^-2]={e_sig}"
            )));
        }

        let (beta, covariance, stats) = match &self.basis {
            Basis::Direct { x, xtx, xty } => {
                let mut a = xtx.clone();
                for i in 0..self.q {
                    a[(i, i)] += e_tau;
                }
                let chol = a
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("X^T X + E[tau^-2] I is not positive definite".into()))?;
                let a_inv = chol.inverse();
                let beta = chol.solve(xty);
                let resid = &self.y - x * &beta;
                let log_det_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let stats = SweepStats {
                    rss: resid.norm_squared(),
                    tr_xtx_cov: xtx.component_mul(&a_inv).sum() / e_sig,
                    tr_cov: a_inv.trace() / e_sig,
                    log_det: -(self.q as f64) * e_sig.ln() - log_det_a,
                };
                (beta, PosteriorCovariance::Full(a_inv / e_sig), stats)
            }
            Basis::Reduced { f, v, d2, fty } => {
                let r = d2.len();
                let theta = DVector::from_iterator(r, (0..r).map(|i| fty[i] / (d2[i] + e_tau)));
                let theta_var = DVector::from_iterator(r, (0..r).map(|i| 1.0 / (e_sig * (d2[i] + e_tau))));
                let resid = &self.y - f * &theta;
                let stats = SweepStats {
                    rss: resid.norm_squared(),
                    tr_xtx_cov: d2.dot(&theta_var),
                    tr_cov: theta_var.sum(),
                    log_det: theta_var.iter().map(|v| v.ln()).sum::<f64>(),
                };
                let covariance = PosteriorCovariance::Reduced {
                    right_factors: v.clone(),
                    theta_var,
                };
                (v * theta, covariance, stats)
            }
        };

        let e_beta_sq = beta.norm_squared() + stats.tr_cov;
        let d_star = (hp.d + 0.5 * (stats.rss + stats.tr_xtx_cov) + 0.5 * e_tau * e_beta_sq).max(RATE_FLOOR);
        let e_sig_new = state.c_star / d_star;
        let b_star = (hp.b + 0.5 * e_sig_new * e_beta_sq).max(RATE_FLOOR);

        if !(beta.iter().all(|v| v.is_finite()) && d_star.is_finite() && b_star.is_finite()) {
            return Err(Error::Numerical("non-finite variational update".into()));
        }
        state.beta_mean = beta;
        state.covariance = covariance;
        state.d_star = d_star;
        state.b_star = b_star;
        state.stats = stats;
        let lb = bound_from_stats(state, hp);
        if !lb.is_finite() {
            return Err(Error::Numerical("non-finite lower bound".into()));
        }
        state.lower_bound = lb;
        Ok(())
    }

    /// Runs sweeps until the bound changes by less than `tol` or `max_iter` is hit.
    pub fn fit(&self, hp: &HyperParameters, opts: &FitOptions) -> Result<VariationalPosterior> {
        hp.validate()?;
        opts.validate()?;
        let mut state = self.initial_state(hp, opts.initial_rate);
        self.iterate(&mut state, hp, opts)?;
        Ok(state)
    }

    /// Continues iterating from `state`.
    pub fn iterate(&self, state: &mut VariationalPosterior, hp: &HyperParameters, opts: &FitOptions) -> Result<()> {
        state.converged = false;
        for _ in 0..opts.max_iter {
            let previous = state.lower_bound;
            self.sweep(state, hp)?;
            state.iterations += 1;
            state.history.push(state.lower_bound);
            if state.history.len() >= 2 && (state.lower_bound - previous).abs() < opts.tol {
                state.converged = true;
                break;
            }
        }
        Ok(())
    }
}

fn check_problem(prob: &RegressionProblem) -> Result<()> {
    if prob.design.nrows() != prob.response.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            prob.design.nrows(),
            prob.response.len()
        )));
    }
    if prob.n_covariates() == 0 {
        return Err(Error::Precondition("regression needs at least one covariate".into()));
    }
    Ok(())
}

/// The bound for arbitrary variational parameters:
///
/// ```text
/// L = -n/2 log 2pi + 1/2 log|S| + q/2
///     + a log b - lnG(a) - a* log b* + lnG(a*)
///     + c log d - lnG(c) - c* log d* + lnG(c*)
///     + (a + q/2 - a*) E[log tau^-2] + (c + (n+q)/2 - c*) E[log sigma^-2]
///     + E[tau^-2](b* - b) + E[sigma^-2](d* - d)
///     - 1/2 E[sigma^-2] (E||y - X beta||^2 + E[tau^-2] E[beta^T beta])
/// ```
///
/// On the SVD basis `q` is the rank and `S` the covariance of `theta`.
///
/// With the shapes at their closed forms the `E[log]` line vanishes, and when
/// `b*` and `d*` are also at their coordinate optima the last two lines
/// collapse to `1/2 E[sigma^-2] E[tau^-2] E[beta^T beta]`; see
/// [`lower_bound_at_optimum`].
fn bound_from_stats(state: &VariationalPosterior, hp: &HyperParameters) -> f64 {
    let s = &state.stats;
    let n = state.n as f64;
    let q = state.prior_dim() as f64;
    let e_tau = state.e_tau2inv();
    let e_sig = state.e_sig2inv();
    let e_beta_sq = state.beta_mean.norm_squared() + s.tr_cov;
    let tau_excess = hp.a + 0.5 * q - state.a_star;
    let sig_excess = hp.c + 0.5 * (n + q) - state.c_star;
    let mut log_terms = 0.0;
    if tau_excess != 0.0 {
        log_terms += tau_excess * (digamma(state.a_star) - state.b_star.ln());
    }
    if sig_excess != 0.0 {
        log_terms += sig_excess * (digamma(state.c_star) - state.d_star.ln());
    }
    -0.5 * n * LN_2PI + 0.5 * s.log_det + 0.5 * q + gamma_norm_terms(state, hp) + log_terms
        + e_tau * (state.b_star - hp.b)
        + e_sig * (state.d_star - hp.d)
        - 0.5 * e_sig * (s.rss + s.tr_xtx_cov + e_tau * e_beta_sq)
}

fn gamma_norm_terms(state: &VariationalPosterior, hp: &HyperParameters) -> f64 {
    hp.a * hp.b.ln() - ln_gamma(hp.a) - state.a_star * state.b_star.ln() + ln_gamma(state.a_star) + hp.c * hp.d.ln()
        - ln_gamma(hp.c)
        - state.c_star * state.d_star.ln()
        + ln_gamma(state.c_star)
}

/// Recomputes the variational lower bound of `state` against `prob`.
///
/// Fails with a numerical error when the covariance is not positive definite.
pub fn lower_bound(state: &VariationalPosterior, prob: &RegressionProblem, hp: &HyperParameters) -> Result<f64> {
    let stats = recompute_stats(state, prob)?;
    let mut probe = state.clone();
    probe.stats = stats;
    Ok(bound_from_stats(&probe, hp))
}

/// The simplified bound, valid when `b*` and `d*` are the coordinate optima
/// for the current `q(beta)` and expectations.
pub fn lower_bound_at_optimum(state: &VariationalPosterior, prob: &RegressionProblem, hp: &HyperParameters) -> Result<f64> {
    let stats = recompute_stats(state, prob)?;
    let n = state.n as f64;
    let q = state.prior_dim() as f64;
    let e_beta_sq = state.beta_mean.norm_squared() + stats.tr_cov;
    Ok(-0.5 * n * LN_2PI + 0.5 * stats.log_det + 0.5 * q + gamma_norm_terms(state, hp)
        + 0.5 * state.e_sig2inv() * state.e_tau2inv() * e_beta_sq)
}

fn recompute_stats(state: &VariationalPosterior, prob: &RegressionProblem) -> Result<SweepStats> {
    let q = prob.n_covariates();
    if state.beta_mean.len() != q || state.covariance.dim() != q || prob.n_samples() != state.n {
        return Err(Error::DimensionMismatch("posterior does not match problem".into()));
    }
    let x = &prob.design;
    let rss = (&prob.response - x * &state.beta_mean).norm_squared();
    match &state.covariance {
        PosteriorCovariance::Full(s) => {
            let sym = (s + s.transpose()) * 0.5;
            let chol = sym
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("posterior covariance is not positive definite".into()))?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let xs = x * &sym;
            Ok(SweepStats {
                rss,
                tr_xtx_cov: xs.component_mul(x).sum(),
                tr_cov: sym.trace(),
                log_det,
            })
        }
        PosteriorCovariance::Reduced { right_factors: v, theta_var } => {
            if theta_var.iter().any(|&t| !(t > 0.0)) {
                return Err(Error::Numerical("posterior covariance is not positive definite".into()));
            }
            let xv = x * v;
            let tr_xtx_cov = (0..theta_var.len()).map(|i| theta_var[i] * xv.column(i).norm_squared()).sum();
            Ok(SweepStats {
                rss,
                tr_xtx_cov,
                tr_cov: theta_var.sum(),
                log_det: theta_var.iter().map(|t| t.ln()).sum::<f64>(),
            })
        }
    }
}

/// One coordinate-ascent pass on a fresh preparation of `prob` (direct basis).
pub fn vb_sweep(state: &VariationalPosterior, prob: &RegressionProblem, hp: &HyperParameters) -> Result<VariationalPosterior> {
    let prep = match &state.covariance {
        PosteriorCovariance::Full(_) => PreparedProblem::direct(prob)?,
        PosteriorCovariance::Reduced { .. } => PreparedProblem::reduced(prob)?,
    };
    if prep.n != state.n || prep.q != state.beta_mean.len() {
        return Err(Error::DimensionMismatch("posterior does not match problem".into()));
    }
    let mut next = state.clone();
    prep.sweep(&mut next, hp)?;
    next.iterations += 1;
    next.history.push(next.lower_bound);
    Ok(next)
}

/// Fits one regression equation for fixed hyperparameters.
pub fn fit_local(prob: &RegressionProblem, hp: &HyperParameters, opts: &FitOptions) -> Result<VariationalPosterior> {
    PreparedProblem::new(prob)?.fit(hp, opts)
}

/// Exact log marginal likelihood lower bound of the covariate-free model
/// `y ~ N(0, sigma^2 I)`, `sigma^-2 ~ Gamma(c, d)`. The bound is tight here.
pub fn intercept_only_lower_bound(y: &DVector<f64>, c: f64, d: f64) -> f64 {
    let n = y.len() as f64;
    let c_star = c + n / 2.0;
    let d_star = d + 0.5 * y.norm_squared();
    -0.5 * n * LN_2PI + c * d.ln() - ln_gamma(c) - c_star * d_star.ln() + ln_gamma(c_star)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(x: &[f64], y: &[f64], q: usize) -> RegressionProblem {
        let n = y.len();
        RegressionProblem {
            response: DVector::from_column_slice(y),
            design: DMatrix::from_row_slice(n, q, x),
            target_gene: 0,
        }
    }

    fn posterior_with(a_star: f64, b_star: f64, beta: Vec<f64>, cov: DMatrix<f64>) -> VariationalPosterior {
        let q = beta.len();
        VariationalPosterior {
            beta_mean: DVector::from_vec(beta),
            covariance: PosteriorCovariance::Full(cov),
            a_star,
            b_star,
            c_star: 1.0,
            d_star: 1.0,
            lower_bound: 0.0,
            iterations: 0,
            converged: false,
            history: vec![],
            n: 5,
            stats: SweepStats {
                tr_cov: q as f64,
                ..Default::default()
            },
        }
    }

    #[test]
    fn gamma_mean_moment() {
        let vp = posterior_with(2.0, 4.0, vec![0.0], DMatrix::identity(1, 1));
        assert_eq!(expected_moments(&vp).e_tau2inv, 0.5);
    }

    #[test]
    fn log_moment_at_unit_gamma() {
        let vp = posterior_with(1.0, 1.0, vec![0.0], DMatrix::identity(1, 1));
        let m = expected_moments(&vp);
        assert!((m.e_log_tau2inv - (-0.5772156649)).abs() < 1e-9, "{}", m.e_log_tau2inv);
    }

    #[test]
    fn beta_square_moment_is_trace() {
        let vp = posterior_with(1.0, 1.0, vec![0.0, 0.0], DMatrix::identity(2, 2));
        assert_eq!(expected_moments(&vp).e_beta_sq, 2.0);
    }

    #[test]
    fn orthonormal_design_closed_form() {
        // columns of X orthonormal, so X^T X = I
        let s = 0.5;
        let x = [s, s, s, -s, s, s, s, -s];
        let y = [1.0, 2.0, -1.0, 0.5];
        let prob = problem(&x, &y, 2);
        let hp = HyperParameters::default();
        let prep = PreparedProblem::direct(&prob).unwrap();
        let mut state = prep.initial_state(&hp, 1.0);
        let t = 3.0;
        // E[sigma^-2] = 1, E[tau^-2] = t
        state.c_star = 1.0;
        state.d_star = 1.0;
        state.a_star = t;
        state.b_star = 1.0;
        prep.sweep(&mut state, &hp).unwrap();
        let xty = prob.design.tr_mul(&prob.response);
        let dense = state.covariance.to_dense();
        assert!((dense - DMatrix::<f64>::identity(2, 2) / (1.0 + t)).amax() < 1e-14);
        assert!((&state.beta_mean - xty / (1.0 + t)).amax() < 1e-14);
    }

    #[test]
    fn zero_response_gives_zero_mean() {
        let prob = problem(&[1.0, 0.3, -1.0, 0.2, 0.5, -0.7, 0.1, 0.9], &[0.0; 4], 2);
        let hp = HyperParameters::default();
        let prep = PreparedProblem::direct(&prob).unwrap();
        let mut state = prep.initial_state(&hp, 0.001);
        let e_tau = state.e_tau2inv();
        prep.sweep(&mut state, &hp).unwrap();
        assert!(state.beta_mean.amax() == 0.0);
        let s = state.covariance.to_dense();
        let expected = hp.d + 0.5 * (prob.design.tr_mul(&prob.design) * &s).trace() + 0.5 * e_tau * s.trace();
        assert!((state.d_star - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn shapes_are_closed_form() {
        let prob = problem(&[1.0, 2.0, 3.0, 4.0, 5.0, 7.0], &[1.0, 0.0, 2.0], 2);
        let hp = HyperParameters::new(2.0, 1.0, 0.5, 0.5).unwrap();
        let fit = fit_local(&prob, &hp, &FitOptions::default()).unwrap();
        assert_eq!(fit.a_star, 2.0 + 1.0);
        assert_eq!(fit.c_star, 0.5 + 2.5);
    }

    #[test]
    fn consistent_bound_matches_simplified_form() {
        let x = [0.3, -1.2, 0.8, 0.5, -0.4, 1.1, 1.5, 0.2, -0.9, -0.6, 0.0, 0.7];
        let y = [0.4, -0.2, 1.3, 0.1, -1.0, 0.6];
        let prob = problem(&x, &y, 2);
        let hp = HyperParameters::default();
        let mut fit = fit_local(&prob, &hp, &FitOptions::default()).unwrap();
        // re-derive b*, d* from the final q(beta) and the other factor's mean
        let e_beta_sq = fit.e_beta_sq();
        let s = fit.covariance.to_dense();
        let rss = (&prob.response - &prob.design * &fit.beta_mean).norm_squared();
        let tr = (prob.design.tr_mul(&prob.design) * &s).trace();
        let e_tau = fit.e_tau2inv();
        fit.d_star = hp.d + 0.5 * (rss + tr) + 0.5 * e_tau * e_beta_sq;
        fit.b_star = hp.b + 0.5 * fit.e_sig2inv() * e_beta_sq;
        // after moving b*, d* the pair is no longer jointly consistent, so iterate the rates
        for _ in 0..200 {
            let e_tau = fit.e_tau2inv();
            fit.d_star = hp.d + 0.5 * (rss + tr) + 0.5 * e_tau * e_beta_sq;
            fit.b_star = hp.b + 0.5 * fit.e_sig2inv() * e_beta_sq;
        }
        let general = lower_bound(&fit, &prob, &hp).unwrap();
        let simple = lower_bound_at_optimum(&fit, &prob, &hp).unwrap();
        assert!((general - simple).abs() < 1e-9, "{general} vs {simple}");
    }

    #[test]
    fn cached_bound_matches_recomputed() {
        let x: Vec<f64> = (0..30).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        let y: Vec<f64> = (0..10).map(|i| ((i * 31) % 7) as f64 / 3.0 - 1.0).collect();
        let prob = problem(&x, &y, 3);
        let hp = HyperParameters::default();
        for prep in [PreparedProblem::direct(&prob).unwrap(), PreparedProblem::reduced(&prob).unwrap()] {
            let fit = prep.fit(&hp, &FitOptions::default()).unwrap();
            let recomputed = lower_bound(&fit, &prob, &hp).unwrap();
            assert!((fit.lower_bound - recomputed).abs() < 1e-9 * recomputed.abs().max(1.0));
        }
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let prob = problem(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0], 1);
        let mut vp = fit_local(&prob, &HyperParameters::default(), &FitOptions::default()).unwrap();
        vp.covariance = PosteriorCovariance::Full(DMatrix::from_element(1, 1, -1.0));
        assert!(matches!(
            lower_bound(&vp, &prob, &HyperParameters::default()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn options_validated() {
        let prob = problem(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0], 1);
        let hp = HyperParameters::default();
        let bad = FitOptions {
            max_iter: 1,
            ..Default::default()
        };
        assert!(fit_local(&prob, &hp, &bad).is_err());
        let bad = FitOptions {
            tol: 0.0,
            ..Default::default()
        };
        assert!(fit_local(&prob, &hp, &bad).is_err());
        assert!(HyperParameters::new(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn iteration_cap_respected() {
        let prob = problem(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 2.0, 5.0], 1);
        let opts = FitOptions {
            tol: 1e-300,
            max_iter: 7,
            ..Default::default()
        };
        let fit = fit_local(&prob, &HyperParameters::default(), &opts).unwrap();
        assert_eq!(fit.iterations, 7);
        assert!(!fit.converged);
        assert_eq!(fit.history.len(), 7);
    }

    #[test]
    fn intercept_only_bound_is_exact() {
        // n = 1: p(y) = integral N(y|0, 1/s) Gamma(s|c,d) ds is a scaled Student t
        let y = DVector::from_vec(vec![0.7]);
        let (c, d) = (2.0, 3.0);
        let exact = {
            let nu = 2.0 * c;
            let scale2 = d / c;
            ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
                - (nu + 1.0) / 2.0 * (1.0 + 0.49 / (nu * scale2)).ln()
        };
        assert!((intercept_only_lower_bound(&y, c, d) - exact).abs() < 1e-12);
    }
}
