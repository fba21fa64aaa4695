//! Evaluation against known graphs, the simulation driver, and the
//! random-splitting harnesses for reproducibility and stability.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ExpressionMatrix;
use crate::eb::EmConfig;
use crate::error::{Error, Result};
use crate::pipeline::{infer_network, InferConfig};
use crate::select::EdgeRanking;
use crate::sim::{make_structure, sample_mvn, sample_precision_retry, stream_rng, GraphKind, GraphParams, GraphSpec};

pub const DEFAULT_FPR_MAX: f64 = 0.2;
/// Target expected number of false selections for stability selection.
pub const DEFAULT_EXPECTED_FALSE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn normalized_pairs(selected: &[(usize, usize)], p: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(selected.len());
    for &(i, j) in selected {
        if i >= p || j >= p {
            return Err(Error::IndexOutOfRange { index: i.max(j), len: p });
        }
        if i == j {
            return Err(Error::Validation(format!("self-pair ({i}, {i}) in edge set")));
        }
        out.push((i.min(j), i.max(j)));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Counts over the `p (p - 1) / 2` unordered pairs.
pub fn confusion(selected: &[(usize, usize)], truth: &GraphSpec) -> Result<ConfusionCounts> {
    let sel = normalized_pairs(selected, truth.p())?;
    let tp = sel.iter().filter(|&&(i, j)| truth.has_edge(i, j)).count();
    let fp = sel.len() - tp;
    let fn_ = truth.n_edges() - tp;
    Ok(ConfusionCounts {
        tp,
        fp,
        fn_,
        tn: truth.n_pairs() - tp - fp - fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub f_score: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rates with empty denominators reported as 0.
pub fn scores(c: &ConfusionCounts) -> Scores {
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f_score = if precision + tpr > 0.0 {
        2.0 * precision * tpr / (precision + tpr)
    } else {
        0.0
    };
    Scores {
        tpr,
        fpr: ratio(c.fp, c.fp + c.tn),
        precision,
        f_score,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRoc {
    /// `(fpr, tpr)` after each group of tied scores, from `(0, 0)` up to
    /// `fpr_max`.
    pub curve: Vec<(f64, f64)>,
    /// Area under the curve up to `fpr_max`, divided by `fpr_max`.
    pub pauc: f64,
}

/// ROC of a ranking restricted to `fpr <= fpr_max`.
///
/// Edges with equal scores enter together, so a tied group contributes a
/// straight segment, which is the expected curve under random tie order.
pub fn partial_roc(ranking: &EdgeRanking, truth: &GraphSpec, fpr_max: f64) -> Result<PartialRoc> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::Config(format!("fpr_max must lie in (0, 1], got {fpr_max}")));
    }
    if ranking.n_genes != truth.p() {
        return Err(Error::DimensionMismatch(format!(
            "ranking over {} genes, truth over {}",
            ranking.n_genes,
            truth.p()
        )));
    }
    let positives = truth.n_edges();
    let negatives = truth.n_pairs() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("ROC needs both edges and non-edges in the truth".into()));
    }
    let (pos, neg) = (positives as f64, negatives as f64);
    let mut curve = vec![(0.0, 0.0)];
    let mut area = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let edges = &ranking.edges;
    let mut start = 0;
    while start < edges.len() {
        let mut end = start;
        while end < edges.len() && edges[end].kappa_bar == edges[start].kappa_bar {
            if truth.has_edge(edges[end].i, edges[end].j) {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        start = end;
        let (x0, y0) = *curve.last().unwrap();
        let (x1, y1) = (fp as f64 / neg, tp as f64 / pos);
        if x1 >= fpr_max {
            // clip the segment at fpr_max
            let y = if x1 > x0 { y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0) } else { y1 };
            area += 0.5 * (y0 + y) * (fpr_max - x0);
            curve.push((fpr_max, y));
            return Ok(PartialRoc {
                curve,
                pauc: (area / fpr_max).clamp(0.0, 1.0),
            });
        }
        area += 0.5 * (y0 + y1) * (x1 - x0);
        curve.push((x1, y1));
    }
    unreachable!("a complete ranking reaches fpr = 1")
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedMetric("correlation needs at least two values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite score".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() + 1) as f64 / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant sequence".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Random disjoint partition of the samples into `n_small` and `n - n_small`
/// rows, each part keeping the original row order.
pub fn random_split<R: Rng + ?Sized>(
    m: &ExpressionMatrix,
    n_small: usize,
    rng: &mut R,
) -> Result<(ExpressionMatrix, ExpressionMatrix)> {
    let n = m.n_samples();
    if n_small < 2 || n_small + 2 > n {
        return Err(Error::Config(format!(
            "small part of {n_small} rows out of {n} leaves fewer than 2 rows on one side"
        )));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let (small, large) = rows.split_at_mut(n_small);
    small.sort_unstable();
    large.sort_unstable();
    Ok((m.select_rows(small)?, m.select_rows(large)?))
}

/// Smallest selection-frequency threshold for which `q^2 / ((2 pi - 1) P)`
/// stays at or below `e_v`, capped at 1.
pub fn stability_threshold(q: f64, e_v: f64, n_pairs: usize) -> Result<f64> {
    if !(q >= 0.0) || !q.is_finite() {
        return Err(Error::Config(format!("mean selection size must be non-negative, got {q}")));
    }
    if !(e_v > 0.0) || !e_v.is_finite() {
        return Err(Error::Config(format!("expected false selections must be positive, got {e_v}")));
    }
    if n_pairs == 0 {
        return Err(Error::Config("no candidate edges".into()));
    }
    let pi = ((q * q / (e_v * n_pairs as f64) + 1.0) / 2.0).min(1.0);
    if pi <= 0.5 {
        return Err(Error::VacuousBound { q });
    }
    Ok(pi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFrequency {
    pub i: usize,
    pub j: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n_resamples: usize,
    pub n_pairs: usize,
    /// Every edge selected at least once, most frequent first.
    pub selection_frequency: Vec<EdgeFrequency>,
    pub q_hat: f64,
    pub e_v: f64,
    pub pi_thr: f64,
    pub stable_edges: Vec<(usize, usize)>,
}

impl StabilityReport {
    /// `q^2 / ((2 pi_thr - 1) P)`, equal to `e_v` unless the threshold was capped.
    pub fn implied_expected_false(&self) -> f64 {
        self.q_hat * self.q_hat / ((2.0 * self.pi_thr - 1.0) * self.n_pairs as f64)
    }
}

pub fn stability_report(selections: &[Vec<(usize, usize)>], p: usize, e_v: f64) -> Result<StabilityReport> {
    if selections.len() < 2 {
        return Err(Error::Config(format!("need at least 2 resamples, got {}", selections.len())));
    }
    if p < 2 {
        return Err(Error::Config(format!("need at least 2 genes, got {p}")));
    }
    let n_pairs = p * (p - 1) / 2;
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut total = 0usize;
    for sel in selections {
        let sel = normalized_pairs(sel, p)?;
        total += sel.len();
        for e in sel {
            *counts.entry(e).or_default() += 1;
        }
    }
    let b = selections.len() as f64;
    let q_hat = total as f64 / b;
    let pi_thr = stability_threshold(q_hat, e_v, n_pairs)?;
    let mut selection_frequency: Vec<EdgeFrequency> = counts
        .into_iter()
        .map(|((i, j), c)| EdgeFrequency {
            i,
            j,
            frequency: c as f64 / b,
        })
        .collect();
    selection_frequency.sort_by(|x, y| y.frequency.total_cmp(&x.frequency).then((x.i, x.j).cmp(&(y.i, y.j))));
    let stable_edges = selection_frequency
        .iter()
        .filter(|f| f.frequency >= pi_thr)
        .map(|f| (f.i, f.j))
        .collect();
    Ok(StabilityReport {
        n_resamples: selections.len(),
        n_pairs,
        selection_frequency,
        q_hat,
        e_v,
        pi_thr,
        stable_edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Empirical-Bayes global shrinkage.
    ShrinkNet,
    /// Fixed vague prior, genes fit independently.
    NoShrink,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::ShrinkNet, Method::NoShrink];

    pub fn name(self) -> &'static str {
        match self {
            Method::ShrinkNet => "shrinknet",
            Method::NoShrink => "noshrink",
        }
    }

    pub fn em_config(self, base: &EmConfig) -> EmConfig {
        EmConfig {
            global_shrinkage: self == Method::ShrinkNet,
            ..*base
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected shrinknet or noshrink)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSimConfig {
    pub kinds: Vec<GraphKind>,
    pub p: usize,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// G-Wishart degrees of freedom.
    pub dof: f64,
    pub fpr_max: f64,
    pub infer: InferConfig,
    /// Keep the partial ROC points of every replicate.
    pub keep_curves: bool,
}

impl Default for ModelSimConfig {
    fn default() -> Self {
        Self {
            kinds: vec![GraphKind::Band],
            p: 100,
            n_list: vec![25, 50, 100],
            reps: 100,
            seed: 1,
            dof: crate::sim::DEFAULT_DOF,
            fpr_max: DEFAULT_FPR_MAX,
            infer: InferConfig::default(),
            keep_curves: false,
        }
    }
}

/// Metrics of one method on one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub kind: GraphKind,
    pub n: usize,
    pub rep: usize,
    pub method: Method,
    pub n_true_edges: usize,
    pub counts: ConfusionCounts,
    pub scores: Scores,
    pub pauc: f64,
    pub p0: f64,
    pub prior_a: f64,
    pub prior_b: f64,
    pub curve: Option<Vec<(f64, f64)>>,
    /// Failure message; metrics are zero when set.
    pub error: Option<String>,
}

impl RepMetrics {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
        Some(Self { mean, sd })
    }
}

/// Summary over the successful replicates of one `(kind, n, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub kind: GraphKind,
    pub n: usize,
    pub method: Method,
    pub succeeded: usize,
    pub failed: usize,
    pub tpr: Option<MeanSd>,
    pub fpr: Option<MeanSd>,
    pub f_score: Option<MeanSd>,
    pub pauc: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSimResult {
    pub rows: Vec<RepMetrics>,
    pub aggregates: Vec<AggregateRow>,
}

/// Per-replicate stream index for cell `(kind, n)` in the order the config
/// lists them.
fn task_index(kind_idx: usize, n_idx: usize, n_count: usize, rep: usize, reps: usize) -> u64 {
    ((kind_idx * n_count + n_idx) * reps + rep) as u64
}

fn simulate_data(kind: GraphKind, p: usize, n: usize, dof: f64, seed: u64, index: u64) -> Result<(GraphSpec, ExpressionMatrix)> {
    let mut rng = stream_rng(seed, index);
    let structure_seed: u64 = rng.random();
    let g = make_structure(kind, p, &GraphParams::default_for(kind, p), structure_seed)?;
    let omega = sample_precision_retry(&g, dof, &mut rng, 10)?;
    let x = sample_mvn(&omega, n, &mut rng)?;
    Ok((g, x))
}

fn evaluate(method: Method, g: &GraphSpec, x: &ExpressionMatrix, config: &ModelSimConfig) -> Result<(ConfusionCounts, f64, crate::pipeline::Inference, Vec<(f64, f64)>)> {
    let infer = InferConfig {
        em: method.em_config(&config.infer.em),
        ..config.infer.clone()
    };
    let inf = infer_network(x, &infer)?;
    let counts = confusion(&inf.selection.selected, g)?;
    let roc = partial_roc(&inf.ranking, g, config.fpr_max)?;
    Ok((counts, roc.pauc, inf, roc.curve))
}

/// Simulates every `(kind, n, rep)` once and scores both methods on it.
///
/// Replicates run in parallel; each draws from its own stream, so the output
/// does not depend on the number of threads. Failures are recorded per row.
pub fn run_model_sim(config: &ModelSimConfig) -> Result<ModelSimResult> {
    if config.kinds.is_empty() || config.n_list.is_empty() || config.reps == 0 {
        return Err(Error::Config("need at least one kind, one sample size and one replicate".into()));
    }
    if config.p < 3 {
        return Err(Error::Config(format!("need at least 3 genes, got {}", config.p)));
    }
    let mut tasks = Vec::new();
    for (ki, &kind) in config.kinds.iter().enumerate() {
        for (ni, &n) in config.n_list.iter().enumerate() {
            for rep in 0..config.reps {
                tasks.push((kind, n, rep, task_index(ki, ni, config.n_list.len(), rep, config.reps)));
            }
        }
    }
    let rows: Vec<RepMetrics> = tasks
        .par_iter()
        .flat_map_iter(|&(kind, n, rep, index)| {
            let data = simulate_data(kind, config.p, n, config.dof, config.seed, index);
            Method::ALL.into_iter().map(move |method| {
                let mut row = RepMetrics {
                    kind,
                    n,
                    rep,
                    method,
                    n_true_edges: 0,
                    counts: ConfusionCounts::default(),
                    scores: scores(&ConfusionCounts::default()),
                    pauc: 0.0,
                    p0: 0.0,
                    prior_a: 0.0,
                    prior_b: 0.0,
                    curve: None,
                    error: None,
                };
                let outcome = match &data {
                    Ok((g, x)) => {
                        row.n_true_edges = g.n_edges();
                        evaluate(method, g, x, config)
                    }
                    Err(e) => Err(Error::Generation(e.to_string())),
                };
                match outcome {
                    Ok((counts, pauc, inf, curve)) => {
                        row.counts = counts;
                        row.scores = scores(&counts);
                        row.pauc = pauc;
                        row.p0 = inf.p0;
                        row.prior_a = inf.fit.hyper.a;
                        row.prior_b = inf.fit.hyper.b;
                        row.curve = config.keep_curves.then_some(curve);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
        })
        .collect();
    let aggregates = aggregate(&rows);
    Ok(ModelSimResult { rows, aggregates })
}

/// Mean and sd per `(kind, n, method)`, in order of first appearance.
pub fn aggregate(rows: &[RepMetrics]) -> Vec<AggregateRow> {
    let mut keys: Vec<(GraphKind, usize, Method)> = Vec::new();
    for r in rows {
        let key = (r.kind, r.n, r.method);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(kind, n, method)| {
            let cell: Vec<&RepMetrics> = rows.iter().filter(|r| (r.kind, r.n, r.method) == (kind, n, method)).collect();
            let ok: Vec<&RepMetrics> = cell.iter().copied().filter(|r| r.ok()).collect();
            let stat = |f: fn(&RepMetrics) -> f64| MeanSd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                kind,
                n,
                method,
                succeeded: ok.len(),
                failed: cell.len() - ok.len(),
                tpr: stat(|r| r.scores.tpr),
                fpr: stat(|r| r.scores.fpr),
                f_score: stat(|r| r.scores.f_score),
                pauc: stat(|r| r.pauc),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_small: usize,
    pub splits: usize,
    pub seed: u64,
    pub infer: InferConfig,
}

/// One method on one split, scored against its own selection on the large part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: usize,
    pub method: Method,
    pub n_selected_small: usize,
    pub n_selected_large: usize,
    pub counts: ConfusionCounts,
    pub scores: Scores,
    /// Spearman correlation of the edge scores from the two parts.
    pub kappa_bar_correlation: Option<f64>,
    pub error: Option<String>,
}

fn split_metrics(split: usize, method: Method, small: &ExpressionMatrix, large: &ExpressionMatrix, infer: &InferConfig) -> Result<SplitMetrics> {
    let cfg = InferConfig {
        em: method.em_config(&infer.em),
        ..infer.clone()
    };
    let a = infer_network(small, &cfg)?;
    let b = infer_network(large, &cfg)?;
    let p = small.n_genes();
    let large_adj = b.selection.adjacency(p);
    let adj = large_adj.map(|v| v == 1);
    let benchmark = GraphSpec::from_adjacency(GraphKind::Random, GraphParams::Density(0.0), adj)?;
    let counts = confusion(&a.selection.selected, &benchmark)?;
    let ka = a.ranking.kappa_bar_matrix();
    let kb = b.ranking.kappa_bar_matrix();
    let upper = |k: &nalgebra::DMatrix<f64>| (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).map(|(i, j)| k[(i, j)]).collect::<Vec<_>>();
    Ok(SplitMetrics {
        split,
        method,
        n_selected_small: a.selection.selected.len(),
        n_selected_large: b.selection.selected.len(),
        counts,
        scores: scores(&counts),
        kappa_bar_correlation: rank_correlation(&upper(&ka), &upper(&kb)).ok(),
        error: None,
    })
}

/// Reproducibility harness: for each random split both methods are fit on
/// the small and the large part, and the small-part selection is scored
/// against the large-part selection of the same method.
pub fn run_split_harness(m: &ExpressionMatrix, config: &SplitConfig) -> Result<Vec<SplitMetrics>> {
    if config.splits == 0 {
        return Err(Error::Config("need at least one split".into()));
    }
    let parts: Vec<(ExpressionMatrix, ExpressionMatrix)> = (0..config.splits)
        .map(|s| random_split(m, config.n_small, &mut stream_rng(config.seed, s as u64)))
        .collect::<Result<_>>()?;
    let rows = parts
        .par_iter()
        .enumerate()
        .flat_map_iter(|(s, (small, large))| {
            Method::ALL.into_iter().map(move |method| {
                split_metrics(s, method, small, large, &config.infer).unwrap_or_else(|e| SplitMetrics {
                    split: s,
                    method,
                    n_selected_small: 0,
                    n_selected_large: 0,
                    counts: ConfusionCounts::default(),
                    scores: scores(&ConfusionCounts::default()),
                    kappa_bar_correlation: None,
                    error: Some(e.to_string()),
                })
            })
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub n_small: usize,
    pub resamples: usize,
    pub seed: u64,
    pub e_v: f64,
    pub method: Method,
    pub infer: InferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    /// Selected edges on the small part of each split.
    pub selections: Vec<Vec<(usize, usize)>>,
    pub report: StabilityReport,
}

/// Selection frequencies over random subsamples of `n_small` rows.
pub fn run_stability(m: &ExpressionMatrix, config: &StabilityConfig) -> Result<StabilityRun> {
    let cfg = InferConfig {
        em: config.method.em_config(&config.infer.em),
        ..config.infer.clone()
    };
    let selections: Vec<Vec<(usize, usize)>> = (0..config.resamples)
        .into_par_iter()
        .map(|s| {
            let (small, _) = random_split(m, config.n_small, &mut stream_rng(config.seed, s as u64))?;
            Ok(infer_network(&small, &cfg)?.selection.selected)
        })
        .collect::<Result<_>>()?;
    let report = stability_report(&selections, m.n_genes(), config.e_v)?;
    Ok(StabilityRun { selections, report })
}
