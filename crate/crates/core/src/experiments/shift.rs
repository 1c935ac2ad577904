//! Training-time distribution shift: label-prior changes and clipped
//! additive input noise, evaluated on one fixed balanced test set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{ols, Ols};
use super::{cell_seed, CellStatus, TAG_EVAL, TAG_TRAIN_DATA, TAG_TRAIN_INIT};
use crate::classifier::{accuracy, fit, Activation, LabelMode, TrainSpec};
use crate::error::{contract, Result};
use crate::inference::mean_and_se;
use crate::numcore::{log_sum_exp, RngStream};
use crate::oracle::{ClassPrior, LabeledSample, Oracle};

/// `Σ π̂_k ln(π̂_k K)`: KL of a label marginal against the uniform prior, nats.
pub fn label_marginal_kl(pi_hat: &ClassPrior) -> f64 {
    prior_kl(pi_hat, &ClassPrior::uniform(pi_hat.len()))
}

/// `KL(a ‖ b)` between two label marginals.
fn prior_kl(a: &ClassPrior, b: &ClassPrior) -> f64 {
    a.probs()
        .iter()
        .zip(b.probs())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub name: String,
    /// Target training prior.
    pub pi: ClassPrior,
    /// Noise std in raw `[-1, 1]` units.
    #[serde(default)]
    pub sigma: f64,
    pub n_train: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl ShiftConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return contract(format!("shift config {}: sigma must be finite and >= 0", self.name));
        }
        if self.pi.len() != k {
            return contract(format!(
                "shift config {}: prior over {} classes, oracle has {k}",
                self.name,
                self.pi.len()
            ));
        }
        if self.n_train < 2 {
            return contract(format!("shift config {}: n_train must be at least 2", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedTrainset {
    /// Grouped by class in class order.
    pub samples: Vec<LabeledSample>,
    pub counts: Vec<u64>,
    /// Realized class frequencies.
    pub pi_hat: ClassPrior,
}

/// Multinomial class counts under `cfg.pi`, oracle draws per class, then
/// `clip(x + ε, -1, 1)` with `ε ~ N(0, σ² I)`. With `σ = 0` the draws are
/// returned untouched.
pub fn build_shifted_trainset(oracle: &Oracle, cfg: &ShiftConfig, rng: &mut RngStream) -> Result<ShiftedTrainset> {
    cfg.validate(oracle.num_classes())?;
    let counts = rng.multinomial(cfg.n_train as u64, cfg.pi.probs());
    let mut samples = Vec::with_capacity(cfg.n_train);
    for (k, &c) in counts.iter().enumerate() {
        for x in oracle.sample_class(k, c as usize, rng)? {
            samples.push(LabeledSample::new(x, k));
        }
    }
    if cfg.sigma > 0.0 {
        for s in &mut samples {
            for v in &mut s.x {
                *v = (*v + cfg.sigma * rng.normal()).clamp(-1.0, 1.0);
            }
        }
    }
    let n = cfg.n_train as f64;
    let pi_hat = ClassPrior::new(counts.iter().map(|&c| c as f64 / n).collect())?;
    Ok(ShiftedTrainset {
        samples,
        counts,
        pi_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub se: f64,
    /// Set when noise is involved: the estimate ignores clipping, and for flow
    /// oracles the noised density itself is a Monte-Carlo plug-in.
    pub intractable: bool,
}

/// Inner draws for the noised log-density of a flow oracle.
pub const FLOW_NOISE_INNER: usize = 256;

/// `ln (p(·|k) * N(0, σ²I))(x)`.
fn noised_log_likelihood(oracle: &Oracle, k: usize, sigma: f64, x: &[f64], inner: &[Vec<f64>]) -> Result<f64> {
    if sigma == 0.0 {
        return oracle.log_likelihood(x, k);
    }
    match oracle {
        Oracle::Gaussian(g) => Oracle::Gaussian(g.convolved(sigma)).log_likelihood(x, k),
        Oracle::Flow(_) => {
            let terms = inner
                .iter()
                .map(|e| {
                    let shifted: Vec<f64> = x.iter().zip(e).map(|(a, b)| a - sigma * b).collect();
                    oracle.log_likelihood(&shifted, k)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(log_sum_exp(&terms)? - (inner.len() as f64).ln())
        }
    }
}

/// `KL[p_shift(x, y) ‖ p_base(x, y)]` for joint densities `π_y p_σ(x|y)`.
///
/// By the chain rule this is the label-marginal KL (computed exactly) plus
/// `E_{y~π_shift} KL(p_σs(·|y) ‖ p_σb(·|y))`, estimated from `n_mc` draws.
/// The conditional term vanishes identically when both noise levels agree.
pub fn mc_distribution_kl(
    shifted: &ShiftConfig,
    baseline: &ShiftConfig,
    oracle: &Oracle,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<KlEstimate> {
    let k = oracle.num_classes();
    shifted.validate(k)?;
    baseline.validate(k)?;
    if !oracle.is_frozen() {
        return contract("mc_distribution_kl requires a frozen oracle");
    }
    let label_kl = prior_kl(&shifted.pi, &baseline.pi);
    if shifted
        .pi
        .probs()
        .iter()
        .zip(baseline.pi.probs())
        .any(|(p, q)| *p > 0.0 && *q == 0.0)
    {
        return contract("mc_distribution_kl: shifted prior puts mass where the baseline has none");
    }
    let intractable = shifted.sigma > 0.0 || baseline.sigma > 0.0;
    if shifted.sigma == baseline.sigma {
        return Ok(KlEstimate {
            kl: label_kl,
            se: 0.0,
            intractable,
        });
    }
    if n_mc < 2 {
        return contract("mc_distribution_kl needs at least 2 Monte-Carlo draws");
    }
    let d = oracle.dim();
    let inner: Vec<Vec<f64>> = match oracle {
        Oracle::Flow(_) => (0..FLOW_NOISE_INNER).map(|_| rng.normal_vec(d)).collect(),
        Oracle::Gaussian(_) => Vec::new(),
    };
    let probs = shifted.pi.probs().to_vec();
    let mut draws = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let y = rng.categorical(&probs);
        let mut x = oracle.sample(y, rng)?;
        for v in &mut x {
            *v += shifted.sigma * rng.normal();
        }
        draws.push((y, x));
    }
    let terms = draws
        .par_iter()
        .map(|(y, x)| {
            Ok(noised_log_likelihood(oracle, *y, shifted.sigma, x, &inner)?
                - noised_log_likelihood(oracle, *y, baseline.sigma, x, &inner)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (m, se) = mean_and_se(&terms);
    Ok(KlEstimate {
        kl: label_kl + m,
        se,
        intractable,
    })
}

/// Noise level whose (uniform-prior) distribution KL against the noiseless
/// baseline is closest to `target`, by bisection with common random numbers.
pub fn match_sigma_to_kl(oracle: &Oracle, target: f64, n_mc: usize, seed: u64) -> Result<(f64, KlEstimate)> {
    if !(target > 0.0) {
        return contract("match_sigma_to_kl: target must be positive");
    }
    let prior = oracle.prior().clone();
    let base = ShiftConfig {
        name: "baseline".into(),
        pi: prior.clone(),
        sigma: 0.0,
        n_train: 2,
        seeds: vec![],
    };
    let at = |sigma: f64| {
        let cfg = ShiftConfig {
            sigma,
            name: "noise".into(),
            ..base.clone()
        };
        mc_distribution_kl(&cfg, &base, oracle, n_mc, &mut RngStream::new(seed, 0))
    };
    let (mut lo, mut hi) = (0.0, 0.01);
    while at(hi)?.kl < target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return contract("match_sigma_to_kl: target KL not reachable");
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid)?.kl < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);
    Ok((sigma, at(sigma)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftProtocol {
    /// Training size of the balanced, noiseless baseline.
    pub n_train: usize,
    #[serde(default = "test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub test_seed: u64,
    #[serde(default = "val_fraction")]
    pub val_fraction: f64,
    pub epochs: usize,
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "tanh")]
    pub activation: Activation,
    #[serde(default = "n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub kl_seed: u64,
}

fn test_size() -> usize {
    super::DEFAULT_EVAL_SIZE
}
fn val_fraction() -> f64 {
    0.2
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
fn n_mc() -> usize {
    20_000
}

/// One trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub config: String,
    pub seed: u64,
    pub sigma: f64,
    pub kl_y_target: f64,
    pub kl_y_empirical: f64,
    pub kl_mc: f64,
    pub kl_mc_se: f64,
    pub intractable: bool,
    pub test_acc: f64,
    pub val_acc: f64,
    /// Percentage points against the baseline model of the same seed.
    pub delta_acc: f64,
}

/// Aggregate over seeds for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub config: String,
    pub sigma: f64,
    pub kl_y_target: f64,
    pub kl_y_empirical_mean: f64,
    pub kl_y_empirical_std: f64,
    pub kl_mc: f64,
    pub kl_mc_se: f64,
    pub intractable: bool,
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub delta_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSuiteResult {
    /// Baseline rows first, then each configuration, seeds in order.
    pub rows: Vec<ShiftRow>,
    pub results: Vec<ShiftResult>,
    /// OLS of per-configuration `delta_acc` on `kl_mc`, baseline included.
    pub regression: Option<Ols>,
    pub cells: Vec<CellStatus>,
}

pub const BASELINE: &str = "baseline";

struct CellOut {
    kl_y_empirical: f64,
    test_acc: f64,
    val_acc: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// The fixed balanced, noiseless test set.
pub fn baseline_test_set(oracle: &Oracle, protocol: &ShiftProtocol) -> Result<Vec<LabeledSample>> {
    oracle.sample_labeled(
        protocol.test_size,
        &mut RngStream::for_cell(protocol.test_seed, &[TAG_EVAL]),
    )
}

fn run_cell(
    oracle: &Oracle,
    cfg: &ShiftConfig,
    seed: u64,
    p: &ShiftProtocol,
    test: &[LabeledSample],
) -> Result<CellOut> {
    let mut rng = RngStream::for_cell(seed, &[TAG_TRAIN_DATA, cfg.n_train as u64]);
    let set = build_shifted_trainset(oracle, cfg, &mut rng)?;
    let mut samples = set.samples;
    rng.shuffle(&mut samples);
    let n_val = ((samples.len() as f64) * p.val_fraction).round() as usize;
    let n_val = n_val.clamp(1, samples.len() - 1);
    let (train, val) = samples.split_at(samples.len() - n_val);
    let spec = TrainSpec {
        label_mode: LabelMode::Sampled,
        learning_rate: p.learning_rate,
        epochs: p.epochs,
        batch_size: p.batch_size,
        seed: cell_seed(seed, &[TAG_TRAIN_INIT]),
        hidden: p.hidden.clone(),
        activation: p.activation,
    };
    let (model, _) = fit(oracle.dim(), oracle.num_classes(), train, &spec)?;
    Ok(CellOut {
        kl_y_empirical: label_marginal_kl(&set.pi_hat),
        test_acc: accuracy(&model, test)?,
        val_acc: accuracy(&model, val)?,
    })
}

/// Train under each shift and the baseline for every seed, score all models
/// on the same baseline test set, and regress accuracy change on KL.
pub fn run_shift_suite(oracle: &Oracle, configs: &[ShiftConfig], protocol: &ShiftProtocol) -> Result<ShiftSuiteResult> {
    if !oracle.is_frozen() {
        return contract("run_shift_suite requires a frozen oracle");
    }
    if !(protocol.val_fraction > 0.0 && protocol.val_fraction < 1.0) {
        return contract("shift protocol: val_fraction must lie in (0, 1)");
    }
    let k = oracle.num_classes();
    for c in configs {
        c.validate(k)?;
        if c.name == BASELINE {
            return contract("shift config name 'baseline' is reserved");
        }
    }
    let mut seeds: Vec<u64> = configs.iter().flat_map(|c| c.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return contract("shift suite: no seeds");
    }
    let baseline = ShiftConfig {
        name: BASELINE.into(),
        pi: ClassPrior::uniform(k),
        sigma: 0.0,
        n_train: protocol.n_train,
        seeds: seeds.clone(),
    };
    let test = baseline_test_set(oracle, protocol)?;
    let all: Vec<&ShiftConfig> = std::iter::once(&baseline).chain(configs).collect();

    let kls = all
        .iter()
        .enumerate()
        .map(|(i, c)| {
            mc_distribution_kl(
                c,
                &baseline,
                oracle,
                protocol.n_mc,
                &mut RngStream::for_cell(protocol.kl_seed, &[i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, u64)> = all
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outs: Vec<Result<CellOut>> = cells
        .par_iter()
        .map(|&(i, s)| run_cell(oracle, all[i], s, protocol, &test))
        .collect();

    let statuses: Vec<CellStatus> = cells
        .iter()
        .zip(&outs)
        .map(|(&(i, s), o)| CellStatus::from_result(format!("{}/seed={s}", all[i].name), o))
        .collect();
    let base_acc = |s: u64| {
        cells
            .iter()
            .zip(&outs)
            .find(|((i, seed), _)| *i == 0 && *seed == s)
            .and_then(|(_, o)| o.as_ref().ok())
            .map(|o| o.test_acc)
    };
    let mut rows = Vec::new();
    for (&(i, s), o) in cells.iter().zip(&outs) {
        let (Ok(o), Some(b)) = (o, base_acc(s)) else { continue };
        let c = all[i];
        rows.push(ShiftRow {
            config: c.name.clone(),
            seed: s,
            sigma: c.sigma,
            kl_y_target: label_marginal_kl(&c.pi),
            kl_y_empirical: o.kl_y_empirical,
            kl_mc: kls[i].kl,
            kl_mc_se: kls[i].se,
            intractable: kls[i].intractable,
            test_acc: o.test_acc,
            val_acc: o.val_acc,
            delta_acc: 100.0 * (o.test_acc - b),
        });
    }
    let results: Vec<ShiftResult> = all
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let r: Vec<&ShiftRow> = rows.iter().filter(|r| r.config == c.name).collect();
            if r.is_empty() {
                return None;
            }
            let (kl_m, kl_s) = mean_std(&r.iter().map(|r| r.kl_y_empirical).collect::<Vec<_>>());
            let (acc_m, acc_s) = mean_std(&r.iter().map(|r| r.test_acc).collect::<Vec<_>>());
            let (d, _) = mean_std(&r.iter().map(|r| r.delta_acc).collect::<Vec<_>>());
            Some(ShiftResult {
                config: c.name.clone(),
                sigma: c.sigma,
                kl_y_target: label_marginal_kl(&c.pi),
                kl_y_empirical_mean: kl_m,
                kl_y_empirical_std: kl_s,
                kl_mc: kls[i].kl,
                kl_mc_se: kls[i].se,
                intractable: kls[i].intractable,
                test_acc_mean: acc_m,
                test_acc_std: acc_s,
                delta_acc: d,
            })
        })
        .collect();
    let xs: Vec<f64> = results.iter().map(|r| r.kl_mc).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.delta_acc).collect();
    Ok(ShiftSuiteResult {
        rows,
        regression: ols(&xs, &ys).ok(),
        results,
        cells: statuses,
    })
}
