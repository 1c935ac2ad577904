//! Experiment families run on a frozen oracle: scaling curves, soft versus
//! hard labels, training-time distribution shift and active learning.

pub mod active;
pub mod fit;
pub mod scaling;
pub mod shift;
pub mod softlabels;
pub mod worlds;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, ece, DEFAULT_ECE_BINS};
use crate::error::Result;
use crate::inference::{annotate_posteriors, decompose, PosteriorConfig, Predictor, DEFAULT_SHARD};
use crate::numcore::RngStream;
use crate::oracle::{LabeledSample, Oracle};

pub use fit::{fit_power_law, fit_power_law_filtered, ols, spearman, FilteredFit, Ols, PowerLawFit};

/// Size of the shared evaluation set.
pub const DEFAULT_EVAL_SIZE: usize = 2000;

/// Outcome of one grid cell, keyed by a stable id such as `mlp/N=256/seed=1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellStatus {
    pub(crate) fn from_result<T>(id: String, r: &Result<T>) -> Self {
        Self {
            id,
            ok: r.is_ok(),
            error: r.as_ref().err().map(|e| e.to_string()),
        }
    }
}

/// Metrics of one trained model on an annotated evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub total_ce: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub accuracy: f64,
    pub ece: f64,
}

pub fn evaluate(model: &dyn Predictor, eval: &[LabeledSample]) -> Result<EvalMetrics> {
    let d = decompose(eval, model)?;
    Ok(EvalMetrics {
        total_ce: d.total_ce,
        aleatoric: d.aleatoric,
        epistemic: d.epistemic,
        accuracy: accuracy(model, eval)?,
        ece: ece(model, eval, DEFAULT_ECE_BINS)?,
    })
}

/// `n` mixture draws carrying exact posteriors under the oracle's own prior.
pub fn annotated_samples(oracle: &Oracle, n: usize, rng: &mut RngStream) -> Result<Vec<LabeledSample>> {
    let mut s = oracle.sample_labeled(n, rng)?;
    annotate_posteriors(
        oracle,
        &mut s,
        &PosteriorConfig::new(oracle.prior().clone()),
        DEFAULT_SHARD,
    )?;
    Ok(s)
}

/// A training seed derived from cell coordinates.
pub(crate) fn cell_seed(seed: u64, coords: &[u64]) -> u64 {
    RngStream::for_cell(seed, coords).next_u64()
}

// stream tags keeping the different uses of one experiment seed apart
pub(crate) const TAG_EVAL: u64 = 0xE7A1;
pub(crate) const TAG_TRAIN_DATA: u64 = 0xDA7A;
pub(crate) const TAG_TRAIN_INIT: u64 = 0x1417;
