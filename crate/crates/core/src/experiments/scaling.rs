//! Epistemic error against training-set size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_power_law_filtered, FilteredFit, MIN_FIT_VALUE};
use super::{
    annotated_samples, cell_seed, evaluate, CellStatus, EvalMetrics, TAG_EVAL, TAG_TRAIN_DATA, TAG_TRAIN_INIT,
};
use crate::classifier::{fit, Activation, LabelMode, TrainSpec};
use crate::error::{contract, Result};
use crate::inference::Predictor;
use crate::numcore::RngStream;
use crate::oracle::{LabeledSample, Oracle};

/// A classifier architecture in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub id: String,
    pub hidden: Vec<usize>,
    #[serde(default = "tanh")]
    pub activation: Activation,
}

fn tanh() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingGrid {
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    #[serde(default = "eval_size")]
    pub eval_size: usize,
    /// Seed of the shared evaluation set.
    #[serde(default)]
    pub eval_seed: u64,
    pub epochs: usize,
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default = "batch")]
    pub batch_size: usize,
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

impl ScalingGrid {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.sizes.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return contract("scaling grid: sizes, seeds and variants must be non-empty");
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return contract("scaling grid: sizes must be strictly increasing");
        }
        if self.sizes[0] < 2 * k {
            return contract(format!(
                "scaling grid: smallest N {} is below 2K = {}",
                self.sizes[0],
                2 * k
            ));
        }
        if self.eval_size == 0 {
            return contract("scaling grid: eval_size must be positive");
        }
        Ok(())
    }

    fn spec(&self, v: &Variant, seed: u64) -> TrainSpec {
        TrainSpec {
            label_mode: LabelMode::Sampled,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            hidden: v.hidden.clone(),
            activation: v.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub variant: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub total_ce: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFit {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FilteredFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    /// Successful cells in canonical (variant, N, seed) order.
    pub rows: Vec<ScalingRow>,
    pub fits: Vec<VariantFit>,
    pub cells: Vec<CellStatus>,
}

impl ScalingResult {
    /// Median epistemic KL per N for one variant.
    pub fn median_epistemic(&self, variant: &str) -> Vec<(usize, f64)> {
        let mut ns: Vec<usize> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.n).collect();
        ns.dedup();
        ns.into_iter()
            .map(|n| {
                let mut v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == variant && r.n == n)
                    .map(|r| r.epistemic)
                    .collect();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                let med = if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                };
                (n, med)
            })
            .collect()
    }
}

pub fn cell_id(variant: &str, n: usize, seed: u64) -> String {
    format!("{variant}/N={n}/seed={seed}")
}

/// The shared evaluation set of a grid.
pub fn eval_set(oracle: &Oracle, grid: &ScalingGrid) -> Result<Vec<LabeledSample>> {
    annotated_samples(
        oracle,
        grid.eval_size,
        &mut RngStream::for_cell(grid.eval_seed, &[TAG_EVAL]),
    )
}

/// Training data for cell `(N, seed)`. Nested in N: a larger N extends the
/// sample drawn for a smaller one.
pub fn train_set(oracle: &Oracle, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    oracle.sample_labeled(n, &mut RngStream::for_cell(seed, &[TAG_TRAIN_DATA]))
}

/// Train one classifier per (variant, N, seed) and decompose its error on
/// the shared evaluation set.
pub fn run_scaling(oracle: &Oracle, grid: &ScalingGrid) -> Result<ScalingResult> {
    run_scaling_with(oracle, grid, |v, data, seed| {
        let spec = grid.spec(v, seed);
        let (c, _) = fit(oracle.dim(), oracle.num_classes(), data, &spec)?;
        Ok(c)
    })
}

/// [`run_scaling`] with a caller-supplied trainer `(variant, data, seed) -> model`.
pub fn run_scaling_with<P, F>(oracle: &Oracle, grid: &ScalingGrid, train: F) -> Result<ScalingResult>
where
    P: Predictor,
    F: Fn(&Variant, &[LabeledSample], u64) -> Result<P> + Sync,
{
    if !oracle.is_frozen() {
        return contract("run_scaling requires a frozen oracle");
    }
    grid.validate(oracle.num_classes())?;
    let eval = eval_set(oracle, grid)?;

    let cells: Vec<(usize, usize, u64)> = (0..grid.variants.len())
        .flat_map(|v| {
            grid.sizes
                .iter()
                .flat_map(move |&n| grid.seeds.iter().map(move |&s| (v, n, s)))
        })
        .collect();
    let outcomes: Vec<Result<EvalMetrics>> = cells
        .par_iter()
        .map(|&(v, n, seed)| {
            let data = train_set(oracle, n, seed)?;
            let model = train(
                &grid.variants[v],
                &data,
                cell_seed(seed, &[TAG_TRAIN_INIT, v as u64, n as u64]),
            )?;
            evaluate(&model, &eval)
        })
        .collect();

    let mut rows = Vec::new();
    let mut statuses = Vec::new();
    for (&(v, n, seed), out) in cells.iter().zip(&outcomes) {
        let variant = &grid.variants[v].id;
        statuses.push(CellStatus::from_result(cell_id(variant, n, seed), out));
        if let Ok(m) = out {
            rows.push(ScalingRow {
                variant: variant.clone(),
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
    let fits = grid
        .variants
        .iter()
        .map(|v| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.variant == v.id)
                .map(|r| (r.n as f64, r.epistemic))
                .collect();
            match fit_power_law_filtered(&pts, MIN_FIT_VALUE) {
                Ok(f) => VariantFit {
                    variant: v.id.clone(),
                    fit: Some(f),
                    error: None,
                },
                Err(e) => VariantFit {
                    variant: v.id.clone(),
                    fit: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ScalingResult {
        rows,
        fits,
        cells: statuses,
    })
}
