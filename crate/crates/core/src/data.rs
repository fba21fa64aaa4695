//! Expression data, per-gene regression problems and the SVD reduction used
//! when a regression has at least as many covariates as samples.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest one are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Samples in rows, genes in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    values: DMatrix<f64>,
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
}

impl ExpressionMatrix {
    /// Validates shape, label uniqueness and finiteness.
    ///
    /// Only `n >= 1` is enforced here so that simulated draws and split halves
    /// can be represented; model fitting checks its own minimum sample size.
    pub fn new(values: DMatrix<f64>, gene_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        let (n, p) = values.shape();
        if gene_ids.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} gene ids for {} columns",
                gene_ids.len(),
                p
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                n
            )));
        }
        if n < 1 {
            return Err(Error::Validation("matrix has no samples".into()));
        }
        if p < 2 {
            return Err(Error::Validation(format!("need at least 2 genes, found {p}")));
        }
        check_unique(&gene_ids, "gene")?;
        check_unique(&sample_ids, "sample")?;
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            // column-major storage
            return Err(Error::MissingValue {
                row: idx % n + 1,
                column: idx / n + 1,
            });
        }
        Ok(Self {
            values,
            gene_ids,
            sample_ids,
        })
    }

    /// Builds a matrix with synthetic labels `g1..gp` and `s1..sn`.
    pub fn with_default_ids(values: DMatrix<f64>) -> Result<Self> {
        let (n, p) = values.shape();
        let genes = (1..=p).map(|i| format!("g{i}")).collect();
        let samples = (1..=n).map(|i| format!("s{i}")).collect();
        Self::new(values, genes, samples)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.values.column(j).into_owned()
    }

    /// Keeps the listed rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.n_samples();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let values = DMatrix::from_fn(rows.len(), self.n_genes(), |i, j| self.values[(rows[i], j)]);
        let samples = rows.iter().map(|&r| self.sample_ids[r].clone()).collect();
        Self::new(values, self.gene_ids.clone(), samples)
    }

    /// Reorders genes: column `k` of the result is column `order[k]` of `self`.
    pub fn permute_genes(&self, order: &[usize]) -> Result<Self> {
        let p = self.n_genes();
        if order.len() != p {
            return Err(Error::DimensionMismatch(format!("permutation of length {} for {p} genes", order.len())));
        }
        let values = DMatrix::from_fn(self.n_samples(), p, |i, k| self.values[(i, order[k])]);
        let genes = order.iter().map(|&j| self.gene_ids[j].clone()).collect();
        Self::new(values, genes, self.sample_ids.clone())
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Tsv,
}

impl TableFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            TableFormat::Csv => b',',
            TableFormat::Tsv => b'\t',
        }
    }

    /// `.tsv`/`.tab`/`.txt` read as TSV, everything else as CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("tsv") | Some("tab") | Some("txt") => TableFormat::Tsv,
            _ => TableFormat::Csv,
        }
    }
}

fn is_missing_token(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "." | "null" | "NULL")
}

/// Reads a delimited matrix whose first row carries column labels.
///
/// With `transpose = false` rows are samples and columns are genes; with
/// `transpose = true` the file is read as genes x samples. A first column of
/// row labels is detected when the first body cell is not numeric.
pub fn load_expression_matrix(path: &Path, format: TableFormat, transpose: bool) -> Result<ExpressionMatrix> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_expression_matrix(&bytes, format, transpose)
}

pub fn parse_expression_matrix(bytes: &[u8], format: TableFormat, transpose: bool) -> Result<ExpressionMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Malformed {
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        records.push(rec);
    }
    let Some((header, body)) = records.split_first() else {
        return Err(Error::Malformed {
            row: 1,
            column: 1,
            message: "empty file".into(),
        });
    };
    if body.is_empty() {
        return Err(Error::Malformed {
            row: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }

    let first_cell = body[0].get(0).unwrap_or("");
    let has_row_labels = !is_missing_token(first_cell) && first_cell.parse::<f64>().is_err();
    let header: Vec<String> = header.iter().map(str::to_string).collect();
    let col_labels: Vec<String> = if has_row_labels && header.len() == body[0].len() {
        header[1..].to_vec()
    } else {
        header
    };
    let width = col_labels.len();
    let offset = usize::from(has_row_labels);

    let mut row_labels = Vec::with_capacity(body.len());
    let mut data = Vec::with_capacity(body.len() * width);
    for (r, rec) in body.iter().enumerate() {
        let line = r + 2;
        if rec.len() != width + offset {
            return Err(Error::Malformed {
                row: line,
                column: rec.len().min(width + offset) + 1,
                message: format!("expected {} fields, found {}", width + offset, rec.len()),
            });
        }
        if has_row_labels {
            row_labels.push(rec[0].to_string());
        }
        for c in 0..width {
            let cell = &rec[c + offset];
            let column = c + offset + 1;
            if is_missing_token(cell) {
                return Err(Error::MissingValue { row: line, column });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Malformed {
                row: line,
                column,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::MissingValue { row: line, column });
            }
            data.push(v);
        }
    }
    let nrows = body.len();
    let table = DMatrix::from_row_slice(nrows, width, &data);
    let row_labels = if has_row_labels {
        row_labels
    } else {
        (1..=nrows).map(|i| format!("{}{i}", if transpose { "g" } else { "s" })).collect()
    };

    let m = if transpose {
        ExpressionMatrix::new(table.transpose(), row_labels, col_labels)?
    } else {
        ExpressionMatrix::new(table, col_labels, row_labels)?
    };
    if m.n_samples() < 3 {
        return Err(Error::Validation(format!("need at least 3 samples, found {}", m.n_samples())));
    }
    Ok(m)
}

/// Centers every gene and, when `scale` is set, divides by its sample
/// standard deviation. Constant genes are rejected in both modes.
pub fn standardize(m: &ExpressionMatrix, scale: bool) -> Result<ExpressionMatrix> {
    let n = m.n_samples();
    if n < 2 {
        return Err(Error::Validation("standardization needs at least 2 samples".into()));
    }
    let mut values = m.values.clone();
    for (j, mut col) in values.column_iter_mut().enumerate() {
        let mean = col.mean();
        let magnitude = col.amax();
        col.add_scalar_mut(-mean);
        let ss = col.norm_squared();
        let sd = (ss / (n - 1) as f64).sqrt();
        if !(sd > 64.0 * f64::EPSILON * magnitude.max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateGene {
                gene: m.gene_ids[j].clone(),
            });
        }
        if scale {
            col /= sd;
        }
    }
    ExpressionMatrix::new(values, m.gene_ids.clone(), m.sample_ids.clone())
}

/// Regression of one gene on all the others.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub response: DVector<f64>,
    pub design: DMatrix<f64>,
    pub target_gene: usize,
}

impl RegressionProblem {
    pub fn n_samples(&self) -> usize {
        self.response.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.design.ncols()
    }
}

/// Gene index `k` (k != j) maps to this column of gene `j`'s design.
pub fn design_column(j: usize, k: usize) -> usize {
    debug_assert_ne!(j, k);
    if k < j {
        k
    } else {
        k - 1
    }
}

pub fn build_problem(m: &ExpressionMatrix, j: usize) -> Result<RegressionProblem> {
    let p = m.n_genes();
    if j >= p {
        return Err(Error::IndexOutOfRange { index: j, len: p });
    }
    let covariates: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    Ok(RegressionProblem {
        response: m.column(j),
        design: m.values.select_columns(&covariates),
        target_gene: j,
    })
}

/// `design = reduced_design * right_factors^T` with `reduced_design = U D`.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub reduced_design: DMatrix<f64>,
    pub right_factors: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub response: DVector<f64>,
}

impl ReducedProblem {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

pub fn svd_reduce(prob: &RegressionProblem) -> Result<ReducedProblem> {
    let design = &prob.design;
    if design.ncols() == 0 || design.amax() == 0.0 {
        return Err(Error::DegenerateDesign);
    }
    // nalgebra's bidiagonal SVD loses accuracy on rank-deficient wide
    // matrices, so the decomposition goes through faer.
    let (n, q) = design.shape();
    let svd = faer::Mat::<f64>::from_fn(n, q, |i, j| design[(i, j)])
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD failed: {e:?}")))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    let sv = DVector::from_fn(s.nrows(), |i, _| s[i]);
    if sv.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite singular value".into()));
    }
    let largest = sv.max();
    let mut keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > RANK_TOLERANCE * largest).collect();
    keep.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let r = keep.len();
    let singular_values = DVector::from_iterator(r, keep.iter().map(|&i| sv[i]));
    let reduced_design = DMatrix::from_fn(n, r, |row, c| u[(row, keep[c])] * singular_values[c]);
    let right_factors = DMatrix::from_fn(q, r, |row, c| v[(row, keep[c])]);
    Ok(ReducedProblem {
        reduced_design,
        right_factors,
        singular_values,
        response: prob.response.clone(),
    })
}

/// Maps reduced-space moments back to coefficient space, materializing only
/// the diagonal of `V * theta_cov * V^T`.
pub fn back_transform(
    theta_mean: &DVector<f64>,
    theta_cov: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let r = v.ncols();
    if theta_mean.len() != r || theta_cov.shape() != (r, r) {
        return Err(Error::DimensionMismatch(format!(
            "V has {r} columns, theta mean has {} entries, theta covariance is {:?}",
            theta_mean.len(),
            theta_cov.shape()
        )));
    }
    let beta_mean = v * theta_mean;
    let vc = v * theta_cov;
    let beta_var = DVector::from_iterator(v.nrows(), (0..v.nrows()).map(|k| vc.row(k).dot(&v.row(k))));
    Ok((beta_mean, beta_var))
}
