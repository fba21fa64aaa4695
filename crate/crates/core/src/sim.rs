//! Synthetic ground truth: graph structures, precision matrices that respect
//! them, and Gaussian samples.
//!
//! Precision matrices are drawn approximately from a G-Wishart distribution
//! with identity scale. An unconstrained Wishart draw is inverted to a
//! covariance, which is then replaced by its maximum-likelihood completion
//! under the graph: the covariance matrix that agrees with the draw on the
//! diagonal and on every edge while its inverse vanishes on the non-edges.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};

/// Largest magnitude tolerated on a non-edge of a generated precision matrix.
pub const NON_EDGE_TOLERANCE: f64 = 1e-8;
pub const MAX_COMPLETION_CYCLES: usize = 10_000;
/// Edge probability of the default random graph.
pub const DEFAULT_RANDOM_DENSITY: f64 = 0.096;
pub const DEFAULT_BANDWIDTH: usize = 4;
pub const DEFAULT_DOF: f64 = 4.0;

/// Generator for draw `index` of a run seeded with `seed`.
///
/// Every draw gets its own ChaCha stream, so results do not depend on the
/// order or the thread in which draws are made.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Band,
    Cluster,
    Hub,
    Random,
}

impl GraphKind {
    pub const ALL: [GraphKind; 4] = [GraphKind::Band, GraphKind::Cluster, GraphKind::Hub, GraphKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Band => "band",
            GraphKind::Cluster => "cluster",
            GraphKind::Hub => "hub",
            GraphKind::Random => "random",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown graph kind '{s}'; expected one of band, cluster, hub, random")))
    }
}

/// Kind-specific structure parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphParams {
    Bandwidth(usize),
    /// Sizes of the disjoint blocks, which must add up to `p`.
    Blocks(Vec<usize>),
    Density(f64),
}

impl GraphParams {
    /// Defaults sized to the densities of the reference benchmark at `p = 100`.
    ///
    /// Hubs use `floor(p / 20)` stars of size 10 and clusters `round(0.06 p)`
    /// cliques of size 10; the remaining genes form blocks of 5, the last one
    /// absorbing any remainder. At `p = 100` this gives 85 hub edges and 350
    /// cluster edges.
    pub fn default_for(kind: GraphKind, p: usize) -> Self {
        match kind {
            GraphKind::Band => GraphParams::Bandwidth(DEFAULT_BANDWIDTH),
            GraphKind::Hub => GraphParams::Blocks(blocks_of_ten_then_five(p, p / 20)),
            GraphKind::Cluster => GraphParams::Blocks(blocks_of_ten_then_five(p, (0.06 * p as f64).round() as usize)),
            GraphKind::Random => GraphParams::Density(DEFAULT_RANDOM_DENSITY),
        }
    }
}

fn blocks_of_ten_then_five(p: usize, tens: usize) -> Vec<usize> {
    let tens = tens.min(p / 10);
    let mut sizes = vec![10; tens];
    let mut rest = p - 10 * tens;
    while rest >= 10 {
        sizes.push(5);
        rest -= 5;
    }
    if rest > 0 {
        sizes.push(rest);
    }
    sizes
}

/// Undirected graph on `p` genes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub params: GraphParams,
    adjacency: DMatrix<bool>,
}

impl GraphSpec {
    /// Wraps an adjacency matrix after checking symmetry and the empty diagonal.
    pub fn from_adjacency(kind: GraphKind, params: GraphParams, adjacency: DMatrix<bool>) -> Result<Self> {
        let p = adjacency.nrows();
        if adjacency.ncols() != p {
            return Err(Error::DimensionMismatch("adjacency matrix is not square".into()));
        }
        if p < 2 {
            return Err(Error::Config(format!("graph needs at least 2 nodes, got {p}")));
        }
        for i in 0..p {
            if adjacency[(i, i)] {
                return Err(Error::Validation(format!("self-loop at node {i}")));
            }
            for j in 0..i {
                if adjacency[(i, j)] != adjacency[(j, i)] {
                    return Err(Error::Validation(format!("adjacency not symmetric at ({j}, {i})")));
                }
            }
        }
        Ok(Self { kind, params, adjacency })
    }

    pub fn p(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<bool> {
        &self.adjacency
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[(i, j)]
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.p();
        (0..p)
            .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[(i, j)])
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    pub fn n_pairs(&self) -> usize {
        self.p() * (self.p() - 1) / 2
    }

    pub fn density(&self) -> f64 {
        self.n_edges() as f64 / self.n_pairs() as f64
    }

    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.adjacency[(i, j)]).collect()
    }
}

/// Builds a graph of the given kind. The seed only matters for random graphs.
pub fn make_structure(kind: GraphKind, p: usize, params: &GraphParams, seed: u64) -> Result<GraphSpec> {
    if p < 2 {
        return Err(Error::Config(format!("graph needs at least 2 nodes, got {p}")));
    }
    let mut adj = DMatrix::from_element(p, p, false);
    let mut link = |i: usize, j: usize| {
        adj[(i, j)] = true;
        adj[(j, i)] = true;
    };
    match (kind, params) {
        (GraphKind::Band, GraphParams::Bandwidth(bw)) => {
            if *bw == 0 {
                return Err(Error::Config("bandwidth must be positive".into()));
            }
            for i in 0..p {
                for j in i + 1..p.min(i + bw + 1) {
                    link(i, j);
                }
            }
        }
        (GraphKind::Cluster | GraphKind::Hub, GraphParams::Blocks(sizes)) => {
            let total: usize = sizes.iter().sum();
            if total != p || sizes.contains(&0) {
                return Err(Error::Config(format!(
                    "block sizes {sizes:?} do not tile {p} genes"
                )));
            }
            let mut start = 0;
            for &s in sizes {
                if kind == GraphKind::Cluster {
                    for i in start..start + s {
                        for j in i + 1..start + s {
                            link(i, j);
                        }
                    }
                } else {
                    // first gene of each block is the centre of its star
                    for j in start + 1..start + s {
                        link(start, j);
                    }
                }
                start += s;
            }
        }
        (GraphKind::Random, GraphParams::Density(d)) => {
            if !(0.0..=1.0).contains(d) {
                return Err(Error::Config(format!("edge probability {d} outside [0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..p {
                for j in i + 1..p {
                    if rng.random::<f64>() < *d {
                        link(i, j);
                    }
                }
            }
        }
        (kind, params) => {
            return Err(Error::Config(format!("parameters {params:?} do not apply to {kind} graphs")));
        }
    }
    GraphSpec::from_adjacency(kind, params.clone(), adj)
}

/// Symmetric positive-definite precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    omega: DMatrix<f64>,
}

impl PrecisionMatrix {
    pub fn new(omega: DMatrix<f64>) -> Result<Self> {
        let p = omega.nrows();
        if omega.ncols() != p {
            return Err(Error::DimensionMismatch("precision matrix is not square".into()));
        }
        if omega.iter().any(|v| !v.is_finite()) || omega != omega.transpose() {
            return Err(Error::Numerical("precision matrix is not finite and symmetric".into()));
        }
        if omega.clone().cholesky().is_none() {
            return Err(Error::Numerical("precision matrix is not positive definite".into()));
        }
        Ok(Self { omega })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn p(&self) -> usize {
        self.omega.nrows()
    }

    /// Largest magnitude over the non-edges of `g`.
    pub fn max_non_edge(&self, g: &GraphSpec) -> f64 {
        max_non_edge(&self.omega, g)
    }
}

fn max_non_edge(omega: &DMatrix<f64>, g: &GraphSpec) -> f64 {
    let p = g.p();
    let mut worst: f64 = 0.0;
    for i in 0..p {
        for j in i + 1..p {
            if !g.has_edge(i, j) {
                worst = worst.max(omega[(i, j)].abs()).max(omega[(j, i)].abs());
            }
        }
    }
    worst
}

/// Bartlett draw from a Wishart distribution with identity scale.
pub fn sample_wishart<R: Rng + ?Sized>(p: usize, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if df <= (p - 1) as f64 {
        return Err(Error::Config(format!("Wishart needs more than {} degrees of freedom, got {df}", p - 1)));
    }
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::Config(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(&a * a.transpose())
}

/// Draws a precision matrix whose zero pattern is the complement of `g`.
///
/// `dof` is the G-Wishart degrees-of-freedom parameter. The unconstrained
/// draw uses `dof + p - 1` degrees of freedom so the diagonal keeps a
/// comparable scale across `p`.
pub fn sample_precision<R: Rng + ?Sized>(g: &GraphSpec, dof: f64, rng: &mut R) -> Result<PrecisionMatrix> {
    if !(dof > 2.0) || !dof.is_finite() {
        return Err(Error::Config(format!("degrees of freedom must exceed 2, got {dof}")));
    }
    let p = g.p();
    let draw = sample_wishart(p, dof + p as f64 - 1.0, rng)?;
    let s = invert_spd(&draw).ok_or_else(|| Error::Generation("Wishart draw is singular".into()))?;
    complete_covariance(&s, g)
}

/// Like [`sample_precision`], drawing again after a failed completion.
pub fn sample_precision_retry<R: Rng + ?Sized>(
    g: &GraphSpec,
    dof: f64,
    rng: &mut R,
    attempts: usize,
) -> Result<PrecisionMatrix> {
    let mut last = Error::Generation("no attempts made".into());
    for _ in 0..attempts.max(1) {
        match sample_precision(g, dof, rng) {
            Err(e @ Error::Generation(_)) => last = e,
            other => return other,
        }
    }
    Err(last)
}

fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

/// Cyclic per-node regression (HTF Algorithm 17.1 without the penalty).
///
/// Returns `W^-1` where `W` matches `s` on the diagonal and the edges of `g`
/// and `W^-1` is zero on its non-edges, after snapping the residual non-edge
/// entries to exactly zero.
fn complete_covariance(s: &DMatrix<f64>, g: &GraphSpec) -> Result<PrecisionMatrix> {
    let p = g.p();
    let neighbours: Vec<Vec<usize>> = (0..p).map(|i| g.neighbours(i)).collect();
    let mut w = s.clone();
    for _ in 0..MAX_COMPLETION_CYCLES {
        for j in 0..p {
            let nb = &neighbours[j];
            let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            // beta over the neighbours solves W_nb,nb beta = s_nb,j
            let beta = if nb.is_empty() {
                DVector::zeros(0)
            } else {
                let w_nn = DMatrix::from_fn(nb.len(), nb.len(), |a, b| w[(nb[a], nb[b])]);
                let s_nj = DVector::from_fn(nb.len(), |a, _| s[(nb[a], j)]);
                w_nn.cholesky()
                    .ok_or_else(|| Error::Generation("lost positive definiteness during completion".into()))?
                    .solve(&s_nj)
            };
            for &k in &others {
                let v: f64 = nb.iter().zip(beta.iter()).map(|(&l, &b)| w[(k, l)] * b).sum();
                w[(k, j)] = v;
                w[(j, k)] = v;
            }
        }
        let omega = invert_spd(&w).ok_or_else(|| Error::Generation("completed covariance is singular".into()))?;
        if max_non_edge(&omega, g) < NON_EDGE_TOLERANCE {
            let snapped = DMatrix::from_fn(p, p, |i, j| {
                if i == j || g.has_edge(i, j) {
                    omega[(i, j)]
                } else {
                    0.0
                }
            });
            return PrecisionMatrix::new(snapped).map_err(|_| Error::Generation("snapped precision is not positive definite".into()));
        }
    }
    Err(Error::Generation(format!(
        "graph-constrained completion did not converge in {MAX_COMPLETION_CYCLES} cycles"
    )))
}

/// `-omega_ij / sqrt(omega_ii omega_jj)` off the diagonal, 1 on it.
pub fn partial_correlations(omega: &PrecisionMatrix) -> DMatrix<f64> {
    let o = omega.matrix();
    let p = o.nrows();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            (-o[(i, j)] / (o[(i, i)] * o[(j, j)]).sqrt()).clamp(-1.0, 1.0)
        }
    })
}

/// `n` independent draws from `N(0, omega^-1)` with gene ids `g1..gp`.
pub fn sample_mvn<R: Rng + ?Sized>(omega: &PrecisionMatrix, n: usize, rng: &mut R) -> Result<ExpressionMatrix> {
    if n == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    let p = omega.p();
    let chol = omega
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("precision matrix is not positive definite".into()))?;
    let lt = chol.l().transpose();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // L^T x = z gives cov(x) = (L L^T)^-1
        let xi = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        x.set_row(i, &xi.transpose());
    }
    ExpressionMatrix::with_default_ids(x)
}
