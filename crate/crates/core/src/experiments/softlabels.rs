//! Hard (posterior argmax) versus soft (full posterior) training targets on
//! the same samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    annotated_samples, cell_seed, evaluate, CellStatus, EvalMetrics, TAG_EVAL, TAG_TRAIN_DATA, TAG_TRAIN_INIT,
};
use crate::classifier::{fit, Activation, LabelMode, TrainSpec};
use crate::error::{contract, Result};
use crate::numcore::RngStream;
use crate::oracle::Oracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftLabelConfig {
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "modes")]
    pub modes: Vec<LabelMode>,
    #[serde(default = "eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub eval_seed: u64,
    pub epochs: usize,
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "tanh")]
    pub activation: Activation,
}

fn modes() -> Vec<LabelMode> {
    vec![LabelMode::Hard, LabelMode::Soft]
}
fn eval_size() -> usize {
    super::DEFAULT_EVAL_SIZE
}
fn lr() -> f64 {
    1e-3
}
fn batch() -> usize {
    32
}
fn hidden() -> Vec<usize> {
    vec![64, 64]
}
fn tanh() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelRow {
    pub mode: LabelMode,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub total_ce: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelResult {
    pub rows: Vec<SoftLabelRow>,
    pub cells: Vec<CellStatus>,
}

impl SoftLabelResult {
    pub fn row(&self, mode: LabelMode, n: usize, seed: u64) -> Option<&SoftLabelRow> {
        self.rows.iter().find(|r| r.mode == mode && r.n == n && r.seed == seed)
    }
}

pub fn mode_name(m: LabelMode) -> &'static str {
    match m {
        LabelMode::Sampled => "sampled",
        LabelMode::Hard => "hard",
        LabelMode::Soft => "soft",
    }
}

/// For each (mode, N, seed) train on the same annotated sample and evaluate
/// on a shared evaluation set. Initialization depends on (N, seed) only, so
/// the modes differ in their targets alone.
pub fn run_softlabels(oracle: &Oracle, cfg: &SoftLabelConfig) -> Result<SoftLabelResult> {
    if !oracle.is_frozen() {
        return contract("run_softlabels requires a frozen oracle");
    }
    if cfg.sizes.is_empty() || cfg.seeds.is_empty() || cfg.modes.is_empty() {
        return contract("softlabels: sizes, seeds and modes must be non-empty");
    }
    let eval = annotated_samples(
        oracle,
        cfg.eval_size,
        &mut RngStream::for_cell(cfg.eval_seed, &[TAG_EVAL]),
    )?;
    let cells: Vec<(LabelMode, usize, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| {
            cfg.sizes
                .iter()
                .flat_map(move |&n| cfg.seeds.iter().map(move |&s| (m, n, s)))
        })
        .collect();
    let outcomes: Vec<Result<EvalMetrics>> = cells
        .par_iter()
        .map(|&(mode, n, seed)| {
            let data = annotated_samples(oracle, n, &mut RngStream::for_cell(seed, &[TAG_TRAIN_DATA]))?;
            let spec = TrainSpec {
                label_mode: mode,
                learning_rate: cfg.learning_rate,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                seed: cell_seed(seed, &[TAG_TRAIN_INIT, n as u64]),
                hidden: cfg.hidden.clone(),
                activation: cfg.activation,
            };
            let (c, _) = fit(oracle.dim(), oracle.num_classes(), &data, &spec)?;
            evaluate(&c, &eval)
        })
        .collect();
    let mut rows = Vec::new();
    let mut statuses = Vec::new();
    for (&(mode, n, seed), out) in cells.iter().zip(&outcomes) {
        statuses.push(CellStatus::from_result(
            format!("{}/N={n}/seed={seed}", mode_name(mode)),
            out,
        ));
        if let Ok(m) = out {
            rows.push(SoftLabelRow {
                mode,
                n,
                seed,
                total_ce: m.total_ce,
                aleatoric: m.aleatoric,
                epistemic: m.epistemic,
                accuracy: m.accuracy,
                ece: m.ece,
            });
        }
    }
    Ok(SoftLabelResult { rows, cells: statuses })
}
