use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Config,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input at row {row}, column {column}: {message}")]
    Malformed {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: usize },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("gene '{gene}' has zero variance")]
    DegenerateGene { gene: String },

    #[error("design matrix is identically zero")]
    DegenerateDesign,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("gene '{gene}': {source}")]
    Gene {
        gene: String,
        #[source]
        source: Box<Error>,
    },

    #[error("edge ({a}, {b}): {source}")]
    Edge {
        a: String,
        b: String,
        #[source]
        source: Box<Error>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precision matrix generation failed: {0}")]
    Generation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("stability bound is vacuous for q = {q}")]
    VacuousBound { q: f64 },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::Malformed { .. }
            | Error::MissingValue { .. }
            | Error::Validation(_)
            | Error::DegenerateGene { .. }
            | Error::IndexOutOfRange { .. }
            | Error::DimensionMismatch(_) => ErrorClass::Input,
            Error::Config(_) | Error::Precondition(_) | Error::VacuousBound { .. } => {
                ErrorClass::Config
            }
            Error::DegenerateDesign
            | Error::Numerical(_)
            | Error::Generation(_)
            | Error::UndefinedMetric(_) => ErrorClass::Numerical,
            Error::Gene { source, .. } | Error::Edge { source, .. } => source.class(),
        }
    }

    pub(crate) fn for_gene(self, gene: &str) -> Error {
        Error::Gene {
            gene: gene.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn for_edge(self, a: &str, b: &str) -> Error {
        Error::Edge {
            a: a.to_string(),
            b: b.to_string(),
            source: Box::new(self),
        }
    }
}
