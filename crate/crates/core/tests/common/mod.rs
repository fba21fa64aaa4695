//! Independent oracles shared by the integration tests. Nothing in here calls
//! into the variational engine.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use shrinknet::data::RegressionProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut impl Rng, n: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `y = X beta + noise` with centered columns.
pub fn random_problem(rng: &mut impl Rng, n: usize, q: usize, signal: f64) -> RegressionProblem {
    let mut x = normal_matrix(rng, n, q);
    for mut c in x.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    let beta = DVector::from_fn(q, |_, _| signal * rng.sample::<f64, _>(StandardNormal));
    let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut y = &x * beta + noise;
    let m = y.mean();
    y.add_scalar_mut(-m);
    RegressionProblem {
        response: y,
        design: x,
        target_gene: 0,
    }
}

pub struct GibbsSummary {
    pub beta_mean: DVector<f64>,
    pub beta_var: DVector<f64>,
}

/// Gibbs sampler for the full conditionals of the shrinkage regression model.
pub fn gibbs(prob: &RegressionProblem, a: f64, b: f64, c: f64, d: f64, draws: usize, burn_in: usize, seed: u64) -> GibbsSummary {
    let mut rng = rng(seed);
    let x = &prob.design;
    let y = &prob.response;
    let n = y.len();
    let q = x.ncols();
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let mut tau: f64 = 1.0;
    let mut sig: f64 = 1.0;
    let mut sum = DVector::zeros(q);
    let mut sum_sq = DVector::zeros(q);
    for it in 0..draws + burn_in {
        let mut a_mat = xtx.clone();
        for i in 0..q {
            a_mat[(i, i)] += tau;
        }
        let chol = a_mat.cholesky().unwrap();
        let mean = chol.solve(&xty);
        // beta = mean + L^-T z / sqrt(sig)
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = chol.l();
        let w = l.transpose().solve_upper_triangular(&z).unwrap();
        let beta = mean + w / sig.sqrt();

        let bb = beta.norm_squared();
        let rss = (y - x * &beta).norm_squared();
        tau = Gamma::new(a + q as f64 / 2.0, 1.0 / (b + 0.5 * sig * bb)).unwrap().sample(&mut rng);
        sig = Gamma::new(c + (n + q) as f64 / 2.0, 1.0 / (d + 0.5 * rss + 0.5 * tau * bb))
            .unwrap()
            .sample(&mut rng);
        if it >= burn_in {
            sum += &beta;
            sum_sq += beta.component_mul(&beta);
        }
    }
    let m = sum / draws as f64;
    let v = sum_sq / draws as f64 - m.component_mul(&m);
    GibbsSummary {
        beta_mean: m,
        beta_var: v,
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log p(y | tau^-2 = t)` with `sigma^-2 ~ Gamma(c, d)` integrated analytically:
/// a multivariate t with scale matrix `I + X X^T / t`. Determinant and
/// quadratic form go through the `q x q` matrix `t I + X^T X` so that tiny `t`
/// stays well conditioned.
pub fn log_marginal_given_tau(prob: &RegressionProblem, t: f64, c: f64, d: f64) -> f64 {
    let x = &prob.design;
    let y = &prob.response;
    let n = y.len();
    let q = x.ncols();
    let mut m = x.transpose() * x;
    for i in 0..q {
        m[(i, i)] += t;
    }
    let chol = m.cholesky().unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() - q as f64 * t.ln();
    let xty = x.transpose() * y;
    let quad = (y.norm_squared() - xty.dot(&chol.solve(&xty))).max(0.0);
    let nh = n as f64 / 2.0;
    ln_gamma(c + nh) - ln_gamma(c) + c * d.ln() - nh * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det
        - (c + nh) * (d + 0.5 * quad).ln()
}

/// `log p(y)` by quadrature over `u = log tau^-2` with a `Gamma(a, b)` prior
/// on `tau^-2` and `sigma^-2` integrated in closed form.
pub fn log_marginal_quadrature(prob: &RegressionProblem, a: f64, b: f64, c: f64, d: f64) -> f64 {
    let (lo, hi) = (-60.0_f64, 25.0_f64);
    let steps = 40_000usize;
    let h = (hi - lo) / steps as f64;
    let mut terms = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let u = lo + i as f64 * h;
        let t = u.exp();
        // prior density of u: b^a / G(a) t^a exp(-b t)
        let log_prior = a * b.ln() - ln_gamma(a) + a * u - b * t;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        terms.push(log_prior + log_marginal_given_tau(prob, t, c, d) + (w * h / 3.0).ln());
    }
    log_sum_exp(&terms)
}

/// Same integral with centered response and covariates, used for the
/// selection sub-models.
pub fn centered(prob: &RegressionProblem) -> RegressionProblem {
    let mut y = prob.response.clone();
    let m = y.mean();
    y.add_scalar_mut(-m);
    let mut x = prob.design.clone();
    for mut c in x.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    RegressionProblem {
        response: y,
        design: x,
        target_gene: prob.target_gene,
    }
}

/// Spearman correlation by direct rank computation (ties averaged).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// `n` draws from `N(0, Omega^-1)` with a tridiagonal precision
/// (`1` on the diagonal, `rho` next to it), standardized.
pub fn chain_data(rng: &mut impl Rng, p: usize, n: usize, rho: f64) -> shrinknet::data::ExpressionMatrix {
    let omega = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else if i.abs_diff(j) == 1 {
            rho
        } else {
            0.0
        }
    });
    let l = omega.cholesky().unwrap().l();
    let z = normal_matrix(rng, p, n);
    let x = l.transpose().solve_upper_triangular(&z).unwrap().transpose();
    let m = shrinknet::data::ExpressionMatrix::with_default_ids(x).unwrap();
    shrinknet::data::standardize(&m, true).unwrap()
}
