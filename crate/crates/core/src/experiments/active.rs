//! Pool-based active learning with acquisition by predictive entropy or by
//! exact epistemic KL against the oracle posterior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{annotated_samples, cell_seed, evaluate, CellStatus, TAG_EVAL, TAG_TRAIN_INIT};
use crate::classifier::{fit, Activation, LabelMode, TrainSpec};
use crate::error::{contract, Error, Result};
use crate::inference::{entropy, kl, Predictor};
use crate::numcore::RngStream;
use crate::oracle::{LabeledSample, Oracle};

const TAG_POOL: u64 = 0xA001;
const TAG_INITIAL: u64 = 0xA002;
const TAG_ACQUIRE: u64 = 0xA003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    MaxEntropy,
    MaxEpistemic,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::MaxEntropy => "max_entropy",
            Strategy::MaxEpistemic => "max_epistemic",
        }
    }
}

/// Pool with hidden oracle posteriors and the indices labeled so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ALState {
    pub pool: Vec<LabeledSample>,
    labeled: Vec<usize>,
    in_labeled: Vec<bool>,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub rounds: usize,
}

impl ALState {
    pub fn new(
        pool: Vec<LabeledSample>,
        initial: &[usize],
        strategy: Strategy,
        batch_size: usize,
        rounds: usize,
    ) -> Result<Self> {
        if pool.is_empty() {
            return contract("active learning: empty pool");
        }
        if let Some(i) = pool.iter().position(|s| s.posterior.is_none()) {
            return contract(format!("active learning: pool sample {i} has no oracle posterior"));
        }
        let mut s = Self {
            in_labeled: vec![false; pool.len()],
            pool,
            labeled: Vec::new(),
            strategy,
            batch_size,
            rounds,
        };
        s.add(initial)?;
        Ok(s)
    }

    /// Labeled pool indices in acquisition order.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.pool.len()).filter(|&i| !self.in_labeled[i]).collect()
    }

    /// Labeled samples in pool order, so that equal label sets train identically.
    pub fn training_set(&self) -> Vec<LabeledSample> {
        (0..self.pool.len())
            .filter(|&i| self.in_labeled[i])
            .map(|i| self.pool[i].clone())
            .collect()
    }

    pub fn add(&mut self, selected: &[usize]) -> Result<()> {
        for (j, &i) in selected.iter().enumerate() {
            if i >= self.pool.len() {
                return contract(format!("active learning: index {i} outside the pool"));
            }
            if self.in_labeled[i] || selected[..j].contains(&i) {
                return contract(format!("active learning: index {i} is already labeled"));
            }
        }
        for &i in selected {
            self.in_labeled[i] = true;
            self.labeled.push(i);
        }
        Ok(())
    }
}

/// Scores of the unlabeled pool under a scoring strategy: `H(q(·|x))` or
/// `KL(p(·|x) ‖ q(·|x))`. Random acquisition has no score.
pub fn acquisition_scores(state: &ALState, model: &dyn Predictor, strategy: Strategy) -> Result<Vec<(usize, f64)>> {
    let idx = state.unlabeled();
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| state.pool[i].x.clone()).collect();
    let q = model.predict_batch(&xs)?;
    idx.iter()
        .zip(&q)
        .map(|(&i, q)| {
            let score = match strategy {
                Strategy::MaxEntropy => entropy(q),
                Strategy::MaxEpistemic => {
                    let p = state.pool[i].posterior.as_ref().expect("checked in ALState::new");
                    if p.len() != q.len() {
                        return contract("acquire: model and oracle disagree on K");
                    }
                    kl(p, q)
                }
                Strategy::Random => return contract("random acquisition has no score"),
            };
            Ok((i, score))
        })
        .collect()
}

/// Choose `n` unlabeled pool indices: uniformly without replacement, or the
/// top `n` scores with ties broken by the lower pool index.
pub fn acquire(state: &ALState, model: &dyn Predictor, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let unlabeled = state.unlabeled();
    if n > unlabeled.len() {
        return contract(format!(
            "acquire: batch of {n} from {} unlabeled samples",
            unlabeled.len()
        ));
    }
    if state.strategy == Strategy::Random {
        let perm = rng.permutation(unlabeled.len());
        return Ok(perm[..n].iter().map(|&j| unlabeled[j]).collect());
    }
    let mut scored = acquisition_scores(state, model, state.strategy)?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored[..n].iter().map(|s| s.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ALConfig {
    pub pool_size: usize,
    pub initial: usize,
    pub batch_size: usize,
    pub rounds: usize,
    #[serde(default = "strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub test_seed: u64,
    pub epochs: usize,
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default = "train_batch")]
    pub train_batch_size: usize,
    #[serde(default = "hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "tanh")]
    pub activation: Activation,
    /// Target for the labels-to-target metric. Defaults, per seed, to the
    /// lowest final accuracy among the strategies.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// A query counts as ambiguous when its oracle posterior entropy is at
    /// least this fraction of `ln K`.
    #[serde(default = "ambiguity")]
    pub ambiguity: f64,
}

fn strategies() -> Vec<Strategy> {
    vec![Strategy::Random, Strategy::MaxEntropy, Strategy::MaxEpistemic]
}
fn test_size() -> usize {
    super::DEFAULT_EVAL_SIZE
}
fn lr() -> f64 {
    1e-3
}
fn train_batch() -> usize {
    32
}
fn hidden() -> Vec<usize> {
    vec![64, 64]
}
fn tanh() -> Activation {
    Activation::Tanh
}
fn ambiguity() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub round: usize,
    pub labels: usize,
    pub accuracy: f64,
    pub epistemic: f64,
    /// Fraction of the labels acquired after the initial set whose oracle
    /// posterior is near-uniform.
    pub ambiguous_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALEfficiency {
    pub strategy: Strategy,
    pub seed: u64,
    pub target_accuracy: f64,
    /// Interpolated label count at which accuracy first reaches the target.
    pub labels_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ALResult {
    pub rows: Vec<ALRow>,
    pub efficiency: Vec<ALEfficiency>,
    /// Acquisition order per (strategy, seed) cell, initial set first.
    pub acquired: Vec<(Strategy, u64, Vec<usize>)>,
    pub cells: Vec<CellStatus>,
}

/// Label count where the piecewise-linear curve `(labels, accuracy)` first
/// reaches `target`.
pub fn labels_to_target(curve: &[(usize, f64)], target: f64) -> Option<f64> {
    let r = curve.iter().position(|p| p.1 >= target)?;
    if r == 0 {
        return Some(curve[0].0 as f64);
    }
    let (l0, a0) = (curve[r - 1].0 as f64, curve[r - 1].1);
    let (l1, a1) = (curve[r].0 as f64, curve[r].1);
    Some(l0 + (target - a0) / (a1 - a0) * (l1 - l0))
}

struct CellOut {
    rows: Vec<ALRow>,
    acquired: Vec<usize>,
}

fn run_cell(oracle: &Oracle, cfg: &ALConfig, strategy: Strategy, seed: u64, test: &[LabeledSample]) -> Result<CellOut> {
    let pool = annotated_samples(oracle, cfg.pool_size, &mut RngStream::for_cell(seed, &[TAG_POOL]))?;
    let initial: Vec<usize> =
        RngStream::for_cell(seed, &[TAG_INITIAL]).permutation(cfg.pool_size)[..cfg.initial].to_vec();
    let ambiguous_at = cfg.ambiguity * (oracle.num_classes() as f64).ln();
    let mut state = ALState::new(pool, &initial, strategy, cfg.batch_size, cfg.rounds)?;
    let mut acq_rng = RngStream::for_cell(seed, &[TAG_ACQUIRE]);
    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    for round in 0..=cfg.rounds {
        let spec = TrainSpec {
            label_mode: LabelMode::Sampled,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            batch_size: cfg.train_batch_size,
            seed: cell_seed(seed, &[TAG_TRAIN_INIT, round as u64]),
            hidden: cfg.hidden.clone(),
            activation: cfg.activation,
        };
        let (model, _) = fit(oracle.dim(), oracle.num_classes(), &state.training_set(), &spec)?;
        let m = evaluate(&model, test)?;
        let acquired = &state.labeled()[cfg.initial..];
        let ambiguous = acquired
            .iter()
            .filter(|&&i| {
                let p = state.pool[i].posterior.as_ref().expect("pool is annotated");
                entropy(p) >= ambiguous_at
            })
            .count();
        rows.push(ALRow {
            strategy,
            seed,
            round,
            labels: state.labeled().len(),
            accuracy: m.accuracy,
            epistemic: m.epistemic,
            ambiguous_fraction: if acquired.is_empty() {
                0.0
            } else {
                ambiguous as f64 / acquired.len() as f64
            },
        });
        if round < cfg.rounds {
            let pick = acquire(&state, &model, cfg.batch_size, &mut acq_rng)?;
            state.add(&pick)?;
        }
    }
    Ok(CellOut {
        rows,
        acquired: state.labeled().to_vec(),
    })
}

/// Every strategy on every seed: the same pool, initial set and test set per
/// seed, a classifier retrained from scratch each round.
pub fn run_active_learning(oracle: &Oracle, cfg: &ALConfig) -> Result<ALResult> {
    if !oracle.is_frozen() {
        return contract("run_active_learning requires a frozen oracle");
    }
    if cfg.seeds.is_empty() || cfg.strategies.is_empty() {
        return contract("active learning: seeds and strategies must be non-empty");
    }
    if cfg.initial == 0 || cfg.batch_size == 0 {
        return contract("active learning: initial set and batch size must be positive");
    }
    if cfg.initial + cfg.rounds * cfg.batch_size > cfg.pool_size {
        return contract(format!(
            "active learning: budget {} + {}x{} exceeds the pool of {}",
            cfg.initial, cfg.rounds, cfg.batch_size, cfg.pool_size
        ));
    }
    let test = annotated_samples(
        oracle,
        cfg.test_size,
        &mut RngStream::for_cell(cfg.test_seed, &[TAG_EVAL]),
    )?;
    let cells: Vec<(Strategy, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&st| cfg.seeds.iter().map(move |&s| (st, s)))
        .collect();
    let outs: Vec<Result<CellOut>> = cells
        .par_iter()
        .map(|&(st, s)| run_cell(oracle, cfg, st, s, &test))
        .collect();

    let cells_status = cells
        .iter()
        .zip(&outs)
        .map(|(&(st, s), o)| CellStatus::from_result(format!("{}/seed={s}", st.name()), o))
        .collect();
    let mut rows = Vec::new();
    let mut acquired = Vec::new();
    for (&(st, s), o) in cells.iter().zip(&outs) {
        if let Ok(o) = o {
            rows.extend(o.rows.iter().cloned());
            acquired.push((st, s, o.acquired.clone()));
        }
    }
    let mut efficiency = Vec::new();
    for &s in &cfg.seeds {
        let curve = |st: Strategy| -> Vec<(usize, f64)> {
            rows.iter()
                .filter(|r| r.strategy == st && r.seed == s)
                .map(|r| (r.labels, r.accuracy))
                .collect()
        };
        let target = match cfg.target_accuracy {
            Some(t) => t,
            None => {
                let finals: Vec<f64> = cfg
                    .strategies
                    .iter()
                    .filter_map(|&st| curve(st).last().map(|p| p.1))
                    .collect();
                if finals.is_empty() {
                    continue;
                }
                finals.iter().copied().fold(f64::INFINITY, f64::min)
            }
        };
        for &st in &cfg.strategies {
            let c = curve(st);
            if c.is_empty() {
                continue;
            }
            efficiency.push(ALEfficiency {
                strategy: st,
                seed: s,
                target_accuracy: target,
                labels_to_target: labels_to_target(&c, target),
            });
        }
    }
    if rows.is_empty() {
        if let Some(Err(e)) = outs.into_iter().find(Result::is_err) {
            return Err(Error::Contract(format!("active learning: every cell failed ({e})")));
        }
    }
    Ok(ALResult {
        rows,
        efficiency,
        acquired,
        cells: cells_status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::PosteriorVector;

    struct Fixed(Vec<PosteriorVector>, Vec<Vec<f64>>);

    impl Predictor for Fixed {
        fn num_classes(&self) -> usize {
            self.0[0].len()
        }
        fn predict_proba(&self, x: &[f64]) -> Result<PosteriorVector> {
            let i = self.1.iter().position(|v| v.as_slice() == x).expect("known input");
            Ok(self.0[i].clone())
        }
    }

    fn sample(i: usize, p: &[f64]) -> LabeledSample {
        LabeledSample {
            x: vec![i as f64],
            y: 0,
            posterior: Some(PosteriorVector::new(p.to_vec()).unwrap()),
        }
    }

    #[test]
    fn entropy_versus_epistemic_on_hand_scores() {
        let k = 3;
        let u = vec![1.0 / 3.0; 3];
        // 0: p one-hot, q uniform; 1: p uniform, q = p; 2: confident p, q slightly off
        let pool = vec![
            sample(0, &[1.0, 0.0, 0.0]),
            sample(1, &u),
            sample(2, &[0.9, 0.05, 0.05]),
        ];
        let q = Fixed(
            vec![
                PosteriorVector::uniform(k),
                PosteriorVector::uniform(k),
                PosteriorVector::new(vec![0.8, 0.1, 0.1]).unwrap(),
            ],
            vec![vec![0.0], vec![1.0], vec![2.0]],
        );
        let st = ALState::new(pool, &[], Strategy::MaxEntropy, 1, 1).unwrap();
        let h = acquisition_scores(&st, &q, Strategy::MaxEntropy).unwrap();
        let e = acquisition_scores(&st, &q, Strategy::MaxEpistemic).unwrap();
        let ln3 = 3f64.ln();
        assert!((h[0].1 - ln3).abs() < 1e-12 && (e[0].1 - ln3).abs() < 1e-12);
        assert!((h[1].1 - ln3).abs() < 1e-12 && e[1].1.abs() < 1e-12);

        let mut rng = RngStream::new(0, 0);
        assert_eq!(acquire(&st, &q, 2, &mut rng).unwrap(), vec![0, 1]);
        let st = ALState {
            strategy: Strategy::MaxEpistemic,
            ..st
        };
        assert_eq!(acquire(&st, &q, 1, &mut rng).unwrap(), vec![0]);
        assert!(e[2].1 > 0.0);
        assert_eq!(acquire(&st, &q, 2, &mut rng).unwrap(), vec![0, 2]);
    }

    #[test]
    fn oracle_model_degenerates_to_index_order() {
        let pool: Vec<_> = (0..6)
            .map(|i| sample(i, &[0.2 + 0.1 * i as f64, 0.8 - 0.1 * i as f64]))
            .collect();
        let q = Fixed(
            pool.iter().map(|s| s.posterior.clone().unwrap()).collect(),
            pool.iter().map(|s| s.x.clone()).collect(),
        );
        let st = ALState::new(pool, &[1], Strategy::MaxEpistemic, 3, 1).unwrap();
        assert_eq!(acquire(&st, &q, 3, &mut RngStream::new(0, 0)).unwrap(), vec![0, 2, 3]);
    }

    #[test]
    fn batch_larger_than_pool_is_rejected() {
        let pool = vec![sample(0, &[0.5, 0.5]), sample(1, &[0.5, 0.5])];
        let q = Fixed(vec![PosteriorVector::uniform(2); 2], vec![vec![0.0], vec![1.0]]);
        let st = ALState::new(pool, &[0], Strategy::Random, 2, 1).unwrap();
        assert!(acquire(&st, &q, 2, &mut RngStream::new(0, 0)).is_err());
        let picked = acquire(&st, &q, 1, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(picked, vec![1]);
    }

    #[test]
    fn state_rejects_relabeling() {
        let pool = vec![sample(0, &[0.5, 0.5]), sample(1, &[0.5, 0.5])];
        let mut st = ALState::new(pool, &[0], Strategy::Random, 1, 1).unwrap();
        assert!(st.add(&[0]).is_err());
        assert!(st.add(&[1, 1]).is_err());
        assert!(st.add(&[5]).is_err());
        st.add(&[1]).unwrap();
        assert_eq!(st.labeled(), &[0, 1]);
    }

    #[test]
    fn interpolated_labels_to_target() {
        let c = [(10, 0.5), (20, 0.7), (30, 0.9)];
        assert_eq!(labels_to_target(&c, 0.4), Some(10.0));
        assert!((labels_to_target(&c, 0.8).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(labels_to_target(&c, 0.95), None);
    }
}
