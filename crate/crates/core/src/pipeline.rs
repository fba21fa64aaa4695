//! End-to-end network inference: standardize, fit, rank, estimate `p0`,
//! select.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, ExpressionMatrix};
use crate::eb::{fit_sem, EmConfig, SemFit};
use crate::error::{Error, Result};
use crate::select::{estimate_p0_with, forward_select_with, kappa_scores, rank_edges, EdgeRanking, SelectionResult, StopConfig, SubModels};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub em: EmConfig,
    /// Bound on the posterior null probability of a selected edge.
    pub alpha: f64,
    /// Prior null probability; estimated from the data when absent.
    pub p0: Option<f64>,
    pub stop: StopConfig,
    /// Scale genes to unit variance in addition to centering.
    pub scale: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            alpha: DEFAULT_ALPHA,
            p0: None,
            stop: StopConfig::default(),
            scale: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub fit: SemFit,
    pub kappa: DMatrix<f64>,
    pub ranking: EdgeRanking,
    pub p0: f64,
    pub p0_estimated: bool,
    pub selection: SelectionResult,
}

pub fn infer_network(m: &ExpressionMatrix, config: &InferConfig) -> Result<Inference> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    let m = standardize(m, config.scale)?;
    let fit = fit_sem(&m, &config.em)?;
    let kappa = kappa_scores(&fit)?;
    let ranking = rank_edges(&kappa)?;
    // the cache is shared by the p0 estimate and the selection pass
    let models = SubModels::new(&m)?;
    let (p0, p0_estimated) = match config.p0 {
        Some(p0) => (p0, false),
        None => (estimate_p0_with(&models, &ranking)?, true),
    };
    let selection = forward_select_with(&models, &ranking, config.alpha, p0, config.stop)?;
    Ok(Inference {
        fit,
        kappa,
        ranking,
        p0,
        p0_estimated,
        selection,
    })
}
