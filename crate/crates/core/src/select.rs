//! Edge ranking and Bayes-factor forward selection.
//!
//! Edges are ordered by the symmetrized posterior signal-to-noise ratio of the
//! two directed coefficients. Selection then walks that order, comparing for
//! each endpoint the regression on its currently selected partners with and
//! without the candidate. Sub-model evidences are variational lower bounds
//! under the default prior `tau^-2 ~ Gamma(1/2, n/2)`; intercepts enter by
//! centering each sub-model.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{design_column, ExpressionMatrix, RegressionProblem};
use crate::eb::SemFit;
use crate::error::{Error, Result};
use crate::vb::{fit_local, intercept_only_lower_bound, FitOptions, HyperParameters, VariationalPosterior};

/// Noise-precision prior used by the selection sub-models.
pub const SELECTION_NOISE_PRIOR: f64 = 0.001;

/// `|E[beta_jk]| / sd[beta_jk]` for every ordered pair; row `j` comes from
/// gene `j`'s regression.
pub fn kappa_scores(fit: &SemFit) -> Result<DMatrix<f64>> {
    kappa_from_posteriors(&fit.posteriors, &fit.gene_ids)
}

pub fn kappa_from_posteriors(posteriors: &[VariationalPosterior], gene_ids: &[String]) -> Result<DMatrix<f64>> {
    let p = posteriors.len();
    let mut kappa = DMatrix::zeros(p, p);
    for (j, post) in posteriors.iter().enumerate() {
        if post.beta_mean.len() != p - 1 {
            return Err(Error::DimensionMismatch(format!(
                "posterior {j} has {} coefficients, expected {}",
                post.beta_mean.len(),
                p - 1
            )));
        }
        let var = post.beta_variances();
        for k in (0..p).filter(|&k| k != j) {
            let c = design_column(j, k);
            let v = var[c];
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Numerical(format!("posterior variance {v} is not positive"))
                    .for_edge(&gene_ids[j], &gene_ids[k]));
            }
            kappa[(j, k)] = post.beta_mean[c].abs() / v.sqrt();
        }
    }
    Ok(kappa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    /// Smaller gene index.
    pub i: usize,
    /// Larger gene index.
    pub j: usize,
    pub kappa_bar: f64,
    /// 1-based position in the ordering.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRanking {
    pub n_genes: usize,
    pub edges: Vec<RankedEdge>,
}

impl EdgeRanking {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `kappa_bar` as a symmetric matrix with zero diagonal.
    pub fn kappa_bar_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_genes, self.n_genes);
        for e in &self.edges {
            m[(e.i, e.j)] = e.kappa_bar;
            m[(e.j, e.i)] = e.kappa_bar;
        }
        m
    }
}

/// Orders all `p(p-1)/2` edges by `(kappa_jk + kappa_kj) / 2`, largest first,
/// ties broken by `(min index, max index)`.
pub fn rank_edges(kappa: &DMatrix<f64>) -> Result<EdgeRanking> {
    let p = kappa.nrows();
    if kappa.ncols() != p {
        return Err(Error::DimensionMismatch(format!("kappa is {}x{}", p, kappa.ncols())));
    }
    let mut edges = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            let (a, b) = (kappa[(i, j)], kappa[(j, i)]);
            if !(a >= 0.0 && b >= 0.0) {
                return Err(Error::Validation(format!("kappa ({i}, {j}) is negative or NaN")));
            }
            edges.push(RankedEdge {
                i,
                j,
                kappa_bar: 0.5 * (a + b),
                rank: 0,
            });
        }
    }
    edges.sort_by(|x, y| y.kappa_bar.total_cmp(&x.kappa_bar).then((x.i, x.j).cmp(&(y.i, y.j))));
    for (r, e) in edges.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    Ok(EdgeRanking { n_genes: p, edges })
}

/// `gamma = (1 - alpha) p0 / (alpha (1 - p0))`.
pub fn threshold_gamma(alpha: f64, p0: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Config(format!("p0 must lie in (0, 1), got {p0}")));
    }
    // product of the two odds
    Ok(((1.0 - alpha) / alpha) * (p0 / (1.0 - p0)))
}

/// Upper bound on the posterior null probability of an edge from its larger
/// directed Bayes factor.
pub fn null_probability_bound(p0: f64, bf_max: f64) -> f64 {
    if bf_max.is_infinite() {
        return 0.0;
    }
    (p0 / (p0 + (1.0 - p0) * bf_max)).clamp(0.0, 1.0)
}

/// The bound, nudged by at most a few ulps so that `bf >= gamma` and
/// `bound <= alpha` agree exactly. Disagreement can only come from rounding
/// right at the threshold.
fn reconciled_bound(p0: f64, bf_max: f64, alpha: f64, passes: bool) -> f64 {
    let mut bound = null_probability_bound(p0, bf_max);
    for _ in 0..8 {
        if (bound <= alpha) == passes {
            break;
        }
        bound = if passes { bound.next_down() } else { bound.next_up() };
    }
    bound
}

/// Evaluates and caches the lower bounds of selection sub-models: one
/// response regressed, with an intercept, on a set of other genes.
pub struct SubModels<'a> {
    values: &'a DMatrix<f64>,
    gene_ids: &'a [String],
    hp: HyperParameters,
    opts: FitOptions,
    cache: Mutex<HashMap<(usize, Vec<usize>), f64>>,
}

impl<'a> SubModels<'a> {
    /// Default prior `Gamma(1/2, n/2)` on the shrinkage precision.
    pub fn new(m: &'a ExpressionMatrix) -> Result<Self> {
        let n = m.n_samples();
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 samples, found {n}")));
        }
        Ok(Self {
            values: m.values(),
            gene_ids: m.gene_ids(),
            hp: HyperParameters::new(0.5, 0.5 * n as f64, SELECTION_NOISE_PRIOR, SELECTION_NOISE_PRIOR)?,
            opts: FitOptions::default(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn prior(&self) -> &HyperParameters {
        &self.hp
    }

    fn centered_column(&self, g: usize) -> DVector<f64> {
        let mut c = self.values.column(g).into_owned();
        let mean = c.mean();
        c.add_scalar_mut(-mean);
        c
    }

    fn check(&self, response: usize, covariates: &[usize]) -> Result<()> {
        let p = self.values.ncols();
        for &g in covariates.iter().chain(std::iter::once(&response)) {
            if g >= p {
                return Err(Error::IndexOutOfRange { index: g, len: p });
            }
        }
        if covariates.contains(&response) {
            return Err(Error::Precondition("response cannot be its own covariate".into()));
        }
        Ok(())
    }

    fn evaluate(&self, response: usize, covariates: &[usize]) -> Result<f64> {
        let y = self.centered_column(response);
        if covariates.is_empty() {
            return Ok(intercept_only_lower_bound(&y, self.hp.c, self.hp.d));
        }
        let n = y.len();
        let mut design = DMatrix::zeros(n, covariates.len());
        for (c, &g) in covariates.iter().enumerate() {
            design.set_column(c, &self.centered_column(g));
        }
        let prob = RegressionProblem {
            response: y,
            design,
            target_gene: response,
        };
        fit_local(&prob, &self.hp, &self.opts).map(|f| f.lower_bound)
    }

    /// Lower bound of `response ~ 1 + covariates` (order irrelevant).
    pub fn lower_bound(&self, response: usize, covariates: &[usize]) -> Result<f64> {
        self.check(response, covariates)?;
        let mut key = covariates.to_vec();
        key.sort_unstable();
        key.dedup();
        let key = (response, key);
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let v = self.evaluate(response, &key.1)?;
        self.cache.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// Evaluates many sub-models in parallel and caches them.
    fn prefetch(&self, keys: Vec<(usize, Vec<usize>)>) -> Result<()> {
        let todo: Vec<(usize, Vec<usize>)> = {
            let cache = self.cache.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            keys.into_iter()
                .filter(|k| !cache.contains_key(k) && seen.insert(k.clone()))
                .collect()
        };
        let values: Vec<f64> = todo
            .par_iter()
            .map(|(r, cov)| {
                self.check(*r, cov)?;
                self.evaluate(*r, cov)
            })
            .collect::<Result<_>>()?;
        let mut cache = self.cache.lock().unwrap();
        for (k, v) in todo.into_iter().zip(values) {
            cache.insert(k, v);
        }
        Ok(())
    }

    /// `log BF` for adding `candidate` to the regression of `response` on
    /// `conditioning`.
    pub fn log_bayes_factor(&self, response: usize, candidate: usize, conditioning: &[usize]) -> Result<f64> {
        if conditioning.contains(&candidate) {
            return Err(Error::Precondition(
                "candidate already in the conditioning set; null and alternative coincide".into(),
            ));
        }
        if candidate == response {
            return Err(Error::Precondition("candidate equals the response".into()));
        }
        if conditioning.contains(&response) {
            return Err(Error::Precondition("response appears among its own covariates".into()));
        }
        let mut alt = conditioning.to_vec();
        alt.push(candidate);
        let wrap = |e: Error| e.for_edge(&self.gene_ids[response], &self.gene_ids[candidate]);
        let l1 = self.lower_bound(response, &alt).map_err(wrap)?;
        let l0 = self.lower_bound(response, conditioning).map_err(wrap)?;
        Ok(l1 - l0)
    }

    pub fn cached_fits(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// `exp(L1 - L0)` for adding gene `candidate` to the regression of gene
/// `response` on `conditioning`.
pub fn selection_bayes_factor(m: &ExpressionMatrix, response: usize, candidate: usize, conditioning: &[usize]) -> Result<f64> {
    SubModels::new(m)?
        .log_bayes_factor(response, candidate, conditioning)
        .map(f64::exp)
}

fn clamp_p0(p0: f64, n_edges: usize) -> f64 {
    let edge = 1.0 / (2.0 * n_edges as f64);
    p0.clamp(edge, 1.0 - edge)
}

/// Fraction of directed Bayes factors `<= 1` when every edge up to the current
/// rank is included, clamped to `[1/(2P), 1 - 1/(2P)]`.
pub fn estimate_p0(m: &ExpressionMatrix, ranking: &EdgeRanking) -> Result<f64> {
    estimate_p0_with(&SubModels::new(m)?, ranking)
}

pub fn estimate_p0_with(models: &SubModels<'_>, ranking: &EdgeRanking) -> Result<f64> {
    let p = ranking.n_genes;
    if ranking.is_empty() {
        return Err(Error::Precondition("ranking has no edges".into()));
    }
    // alternative and null covariate sets for both directions of each rank
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); p];
    let mut pairs = Vec::with_capacity(2 * ranking.len());
    for e in &ranking.edges {
        for (resp, cand) in [(e.i, e.j), (e.j, e.i)] {
            let null = partners[resp].clone();
            partners[resp].push(cand);
            pairs.push((resp, partners[resp].clone(), null));
        }
    }
    let mut keys = Vec::with_capacity(2 * pairs.len());
    for (resp, alt, null) in &pairs {
        let mut a = alt.clone();
        a.sort_unstable();
        let mut z = null.clone();
        z.sort_unstable();
        keys.push((*resp, a));
        keys.push((*resp, z));
    }
    models.prefetch(keys)?;
    let mut not_favoured = 0usize;
    for (resp, alt, null) in &pairs {
        let l1 = models.lower_bound(*resp, alt)?;
        let l0 = models.lower_bound(*resp, null)?;
        if l1 - l0 <= 0.0 {
            not_favoured += 1;
        }
    }
    Ok(clamp_p0(not_favoured as f64 / (2 * ranking.len()) as f64, ranking.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopConfig {
    /// Stop after this many consecutive rejected ranks.
    pub patience: Option<usize>,
    /// Stop once the rank exceeds `ceil((1 - p0) P)`.
    pub use_rmax: bool,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            patience: Some(100),
            use_rmax: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Exhausted,
    RankLimit,
    Patience,
}

/// Outcome for one evaluated edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDecision {
    pub i: usize,
    pub j: usize,
    pub rank: usize,
    pub kappa_bar: f64,
    /// `log BF` with gene `i` as the response.
    pub log_bf_i: f64,
    /// `log BF` with gene `j` as the response.
    pub log_bf_j: f64,
    pub bayes_factor_max: f64,
    pub p0_posterior_bound: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected edges `(i, j)` with `i < j`, in rank order.
    pub selected: Vec<(usize, usize)>,
    /// Every edge that was evaluated before stopping, in rank order.
    pub decisions: Vec<EdgeDecision>,
    pub p0_hat: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub rank_limit: usize,
    pub stop_reason: StopReason,
}

impl SelectionResult {
    pub fn adjacency(&self, p: usize) -> DMatrix<u8> {
        let mut a = DMatrix::zeros(p, p);
        for &(i, j) in &self.selected {
            a[(i, j)] = 1;
            a[(j, i)] = 1;
        }
        a
    }
}

pub fn forward_select(m: &ExpressionMatrix, ranking: &EdgeRanking, alpha: f64, p0: f64, stop: StopConfig) -> Result<SelectionResult> {
    forward_select_with(&SubModels::new(m)?, ranking, alpha, p0, stop)
}

/// Walks the ranking once. At each rank the two endpoint regressions on their
/// currently selected partners are augmented by the other endpoint; the edge
/// is kept iff the larger Bayes factor exceeds `gamma`. Rejected edges are
/// never revisited.
pub fn forward_select_with(
    models: &SubModels<'_>,
    ranking: &EdgeRanking,
    alpha: f64,
    p0: f64,
    stop: StopConfig,
) -> Result<SelectionResult> {
    let gamma = threshold_gamma(alpha, p0)?;
    if stop.patience == Some(0) {
        return Err(Error::Config("patience must be at least 1".into()));
    }
    let n_edges = ranking.len();
    let rank_limit = if stop.use_rmax {
        ((1.0 - p0) * n_edges as f64).ceil() as usize
    } else {
        n_edges
    };
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); ranking.n_genes];
    let mut selected = Vec::new();
    let mut decisions = Vec::new();
    let mut misses = 0usize;
    let mut stop_reason = StopReason::Exhausted;

    for e in &ranking.edges {
        if e.rank > rank_limit {
            stop_reason = StopReason::RankLimit;
            break;
        }
        let (lbf_i, lbf_j) = rayon::join(
            || models.log_bayes_factor(e.i, e.j, &partners[e.i]),
            || models.log_bayes_factor(e.j, e.i, &partners[e.j]),
        );
        let (lbf_i, lbf_j) = (lbf_i?, lbf_j?);
        let bf_max = lbf_i.max(lbf_j).exp();
        let passes = bf_max >= gamma;
        let bound = reconciled_bound(p0, bf_max, alpha, passes);
        assert_eq!(
            passes,
            bound <= alpha,
            "threshold identity broken at rank {}: BF={bf_max}, gamma={gamma}, bound={bound}",
            e.rank
        );
        let keep = bf_max > gamma;
        if keep {
            partners[e.i].push(e.j);
            partners[e.j].push(e.i);
            selected.push((e.i, e.j));
            misses = 0;
        } else {
            misses += 1;
        }
        decisions.push(EdgeDecision {
            i: e.i,
            j: e.j,
            rank: e.rank,
            kappa_bar: e.kappa_bar,
            log_bf_i: lbf_i,
            log_bf_j: lbf_j,
            bayes_factor_max: bf_max,
            p0_posterior_bound: bound,
            selected: keep,
        });
        if stop.patience.is_some_and(|limit| misses >= limit) {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    if stop_reason == StopReason::Exhausted && decisions.len() < n_edges {
        stop_reason = StopReason::RankLimit;
    }

    Ok(SelectionResult {
        selected,
        decisions,
        p0_hat: p0,
        gamma,
        alpha,
        rank_limit,
        stop_reason,
    })
}
