//! Oracle quality checks: nearest-neighbour memorization, manifold coverage,
//! spread ratios and self-validation against the Bayes bound. Distances are
//! Euclidean in raw input space.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, fit, LabelMode, TrainSpec};
use crate::error::{contract, Result};
use crate::experiments::scaling::Variant;
use crate::inference::{bayes_accuracy, BayesAccuracy, OraclePredictor, Predictor};
use crate::numcore::RngStream;
use crate::oracle::{LabeledSample, Oracle};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_dims(sets: &[&[Vec<f64>]]) -> Result<usize> {
    let d = sets.iter().flat_map(|s| s.first()).map(Vec::len).next().unwrap_or(0);
    if sets.iter().any(|s| s.iter().any(|v| v.len() != d)) {
        return contract("validate: vectors differ in dimension");
    }
    Ok(d)
}

/// Distance from each point of `from` to its `k`-th nearest point in `to`
/// (`k = 1` is the nearest). With `skip_self`, `from` and `to` are the same
/// set and each point's own entry is ignored.
pub fn kth_nn_distances(from: &[Vec<f64>], to: &[Vec<f64>], k: usize, skip_self: bool) -> Vec<f64> {
    from.par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut best = vec![f64::INFINITY; k];
            for (j, b) in to.iter().enumerate() {
                if skip_self && i == j {
                    continue;
                }
                let d = dist(a, b);
                if d < best[k - 1] {
                    let pos = best.partition_point(|&x| x <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            best[k - 1]
        })
        .collect()
}

/// Linear-interpolation quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return contract("quantile of an empty set");
    }
    if !(0.0..=1.0).contains(&q) {
        return contract(format!("quantile level {q} outside [0, 1]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// How the memorization distance threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemThreshold {
    /// Percentile (0-100) of training-to-training nearest-neighbour distances.
    Percentile(f64),
    Absolute(f64),
}

impl Default for MemThreshold {
    fn default() -> Self {
        MemThreshold::Percentile(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memorization {
    pub rate: f64,
    pub threshold: f64,
    /// Nearest training distance of each generated point, in input order.
    pub distances: Vec<f64>,
}

/// Fraction of generated points with a training point closer than the threshold.
pub fn memorization_check(train: &[Vec<f64>], generated: &[Vec<f64>], threshold: MemThreshold) -> Result<Memorization> {
    if train.is_empty() || generated.is_empty() {
        return contract("memorization_check: both sets must be non-empty");
    }
    check_dims(&[train, generated])?;
    let threshold = match threshold {
        MemThreshold::Absolute(t) => t,
        MemThreshold::Percentile(p) => {
            if train.len() < 2 {
                return contract("memorization_check: percentile threshold needs two training points");
            }
            quantile(&kth_nn_distances(train, train, 1, true), p / 100.0)?
        }
    };
    let distances = kth_nn_distances(generated, train, 1, false);
    Ok(Memorization {
        rate: memorization_rate(&distances, threshold),
        threshold,
        distances,
    })
}

pub fn memorization_rate(distances: &[f64], threshold: f64) -> f64 {
    distances.iter().filter(|&&d| d < threshold).count() as f64 / distances.len() as f64
}

/// Fraction of real points whose nearest generated point lies within the
/// `percentile` (0-100) of real-to-real `k`-NN distances.
pub fn coverage(real: &[Vec<f64>], generated: &[Vec<f64>], k: usize, percentile: f64) -> Result<f64> {
    if k == 0 {
        return contract("coverage: k must be at least 1");
    }
    if real.len() < k + 1 || generated.len() < k + 1 {
        return contract(format!("coverage: both sets need at least k + 1 = {} points", k + 1));
    }
    check_dims(&[real, generated])?;
    let radius = quantile(&kth_nn_distances(real, real, k, true), percentile / 100.0)?;
    let nn = kth_nn_distances(real, generated, 1, false);
    Ok(nn.iter().filter(|&&d| d <= radius).count() as f64 / real.len() as f64)
}

pub const COVERAGE_K: usize = 3;
pub const COVERAGE_PERCENTILE: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadRatio {
    /// Trace of the covariance, generated over real.
    pub variance_ratio: f64,
    /// Mean pairwise distance, generated over real.
    pub distance_ratio: f64,
}

fn total_variance(v: &[Vec<f64>]) -> f64 {
    let n = v.len() as f64;
    let d = v[0].len();
    (0..d)
        .map(|j| {
            let m = v.iter().map(|x| x[j]).sum::<f64>() / n;
            v.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum()
}

fn mean_pairwise(v: &[Vec<f64>]) -> f64 {
    let total: f64 = (0..v.len())
        .into_par_iter()
        .map(|i| v[i + 1..].iter().map(|b| dist(&v[i], b)).sum::<f64>())
        .sum();
    total / (v.len() * (v.len() - 1) / 2) as f64
}

pub fn variance_ratio(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<SpreadRatio> {
    if real.len() < 2 || generated.len() < 2 {
        return contract("variance_ratio: each set needs at least two points");
    }
    check_dims(&[real, generated])?;
    let (vr, vg) = (total_variance(real), total_variance(generated));
    let (dr, dg) = (mean_pairwise(real), mean_pairwise(generated));
    if vr == 0.0 || dr == 0.0 {
        return contract("variance_ratio: real set has no spread");
    }
    Ok(SpreadRatio {
        variance_ratio: vg / vr,
        distance_ratio: dg / dr,
    })
}

/// [`variance_ratio`] per class label.
pub fn variance_ratios(real: &[LabeledSample], generated: &[LabeledSample], k: usize) -> Result<Vec<SpreadRatio>> {
    (0..k)
        .map(|c| {
            let pick = |s: &[LabeledSample]| s.iter().filter(|x| x.y == c).map(|x| x.x.clone()).collect::<Vec<_>>();
            variance_ratio(&pick(real), &pick(generated))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfValidationConfig {
    pub n_train: usize,
    pub variants: Vec<Variant>,
    #[serde(default = "n_test")]
    pub n_test: usize,
    #[serde(default = "mc")]
    pub mc_samples: usize,
    pub epochs: usize,
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn n_test() -> usize {
    crate::experiments::DEFAULT_EVAL_SIZE
}
fn mc() -> usize {
    20_000
}
fn lr() -> f64 {
    1e-3
}
fn batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub variant: String,
    pub accuracy: f64,
    /// `bayes_acc - accuracy`, percentage points.
    pub gap_pp: f64,
    /// Combined standard error of the gap, percentage points.
    pub se_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfValidation {
    pub bayes: BayesAccuracy,
    pub entries: Vec<GapEntry>,
}

/// Standard error of `bayes_acc - acc` with `acc` measured on `n_test` samples.
pub fn gap_se(bayes: &BayesAccuracy, acc: f64, n_test: usize) -> f64 {
    (bayes.se_acc.powi(2) + acc * (1.0 - acc) / n_test as f64).sqrt()
}

/// Train each variant on fresh oracle samples and compare its accuracy with
/// the Monte-Carlo Bayes accuracy.
pub fn self_validation(oracle: &Oracle, cfg: &SelfValidationConfig) -> Result<SelfValidation> {
    self_validation_with(oracle, cfg, |v, data, seed| {
        let spec = TrainSpec {
            label_mode: LabelMode::Sampled,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed,
            hidden: v.hidden.clone(),
            activation: v.activation,
        };
        Ok(fit(oracle.dim(), oracle.num_classes(), data, &spec)?.0)
    })
}

pub fn self_validation_with<P, F>(oracle: &Oracle, cfg: &SelfValidationConfig, train: F) -> Result<SelfValidation>
where
    P: Predictor,
    F: Fn(&Variant, &[LabeledSample], u64) -> Result<P> + Sync,
{
    if !oracle.is_frozen() {
        return contract("self_validation requires a frozen oracle");
    }
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return contract("self_validation: n_train and n_test must be positive");
    }
    let bayes = bayes_accuracy(oracle, cfg.mc_samples, &mut RngStream::new(cfg.seed, 0x5E1F))?;
    let data = oracle.sample_labeled(cfg.n_train, &mut RngStream::new(cfg.seed, 0x5E20))?;
    let test = oracle.sample_labeled(cfg.n_test, &mut RngStream::new(cfg.seed, 0x5E21))?;
    let entries = cfg
        .variants
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let model = train(v, &data, crate::experiments::cell_seed(cfg.seed, &[i as u64]))?;
            let acc = accuracy(&model, &test)?;
            Ok(GapEntry {
                variant: v.id.clone(),
                accuracy: acc,
                gap_pp: 100.0 * (bayes.bayes_acc - acc),
                se_pp: 100.0 * gap_se(&bayes, acc, cfg.n_test),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelfValidation { bayes, entries })
}

/// Self-validation with the oracle itself as the classifier.
pub fn self_validation_oracle(oracle: &Oracle, cfg: &SelfValidationConfig) -> Result<SelfValidation> {
    self_validation_with(oracle, cfg, |_, _, _| Ok(OraclePredictor::new(oracle)))
}

/// Equal-width histogram `(bin centre, count)` over `[min, max]` of the data.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<(f64, usize)>> {
    if values.is_empty() || bins == 0 {
        return contract("histogram: need values and at least one bin");
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + (i as f64 + 0.5) * width, c))
        .collect())
}

pub const REPORT_QUANTILES: [f64; 5] = [0.01, 0.1, 0.5, 0.9, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub memorization_rate: f64,
    pub memorization_threshold: f64,
    pub nn_distance_quantiles: BTreeMap<String, f64>,
    pub coverage: f64,
    pub variance_ratio_per_class: Vec<f64>,
    pub distance_ratio_per_class: Vec<f64>,
    /// Bayes-bound gap per classifier variant, percentage points.
    pub self_validation_gap: BTreeMap<String, f64>,
    pub bayes_acc: f64,
    pub bayes_acc_se: f64,
}

impl ValidationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default)]
    pub threshold: MemThreshold,
    #[serde(default = "coverage_k")]
    pub coverage_k: usize,
    #[serde(default = "coverage_pct")]
    pub coverage_percentile: f64,
    pub self_validation: SelfValidationConfig,
}

fn coverage_k() -> usize {
    COVERAGE_K
}
fn coverage_pct() -> f64 {
    COVERAGE_PERCENTILE
}

/// All checks of `oracle` against the real (training) samples it was fit
/// to. Generated samples match the real class counts. Returns the report
/// and the memorization distances for histogram output.
pub fn validate_oracle(
    oracle: &Oracle,
    real: &[LabeledSample],
    cfg: &ValidateConfig,
    rng: &mut RngStream,
) -> Result<(ValidationReport, Vec<f64>)> {
    let k = oracle.num_classes();
    if real.iter().any(|s| s.y >= k) {
        return contract("validate: real label out of range");
    }
    let mut generated = Vec::with_capacity(real.len());
    for c in 0..k {
        let n = real.iter().filter(|s| s.y == c).count();
        generated.extend(
            oracle
                .sample_class(c, n, rng)?
                .into_iter()
                .map(|x| LabeledSample::new(x, c)),
        );
    }
    let rx: Vec<Vec<f64>> = real.iter().map(|s| s.x.clone()).collect();
    let gx: Vec<Vec<f64>> = generated.iter().map(|s| s.x.clone()).collect();
    let mem = memorization_check(&rx, &gx, cfg.threshold)?;
    let cov = coverage(&rx, &gx, cfg.coverage_k, cfg.coverage_percentile)?;
    let spread = variance_ratios(real, &generated, k)?;
    let sv = self_validation(oracle, &cfg.self_validation)?;
    let nn_distance_quantiles = REPORT_QUANTILES
        .iter()
        .map(|&q| Ok((format!("{q}"), quantile(&mem.distances, q)?)))
        .collect::<Result<_>>()?;
    Ok((
        ValidationReport {
            memorization_rate: mem.rate,
            memorization_threshold: mem.threshold,
            nn_distance_quantiles,
            coverage: cov,
            variance_ratio_per_class: spread.iter().map(|s| s.variance_ratio).collect(),
            distance_ratio_per_class: spread.iter().map(|s| s.distance_ratio).collect(),
            self_validation_gap: sv.entries.iter().map(|e| (e.variant.clone(), e.gap_pp)).collect(),
            bayes_acc: sv.bayes.bayes_acc,
            bayes_acc_se: sv.bayes.se_acc,
        },
        mem.distances,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(n: usize, centre: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = RngStream::new(seed, 0);
        (0..n).map(|_| vec![centre + r.normal(), r.normal()]).collect()
    }

    #[test]
    fn exact_copies_are_memorized() {
        let train = cloud(200, 0.0, 1);
        let gen: Vec<_> = train[..50].to_vec();
        let m = memorization_check(&train, &gen, MemThreshold::default()).unwrap();
        assert_eq!(m.rate, 1.0);
        assert!(m.distances.iter().all(|&d| d == 0.0));
        let far = cloud(50, 100.0, 2);
        assert_eq!(
            memorization_check(&train, &far, MemThreshold::default()).unwrap().rate,
            0.0
        );
    }

    #[test]
    fn coverage_fixtures() {
        let real = cloud(300, 0.0, 3);
        assert_eq!(coverage(&real, &real, 3, 90.0).unwrap(), 1.0);
        assert_eq!(coverage(&real, &cloud(300, 500.0, 4), 3, 90.0).unwrap(), 0.0);

        let mut two = cloud(400, -20.0, 5);
        two.extend(cloud(400, 20.0, 6));
        let c = coverage(&two, &cloud(800, -20.0, 7), 3, 90.0).unwrap();
        assert!((c - 0.5).abs() <= 0.05, "{c}");
        assert!(coverage(&real[..3], &real, 3, 90.0).is_err());
    }

    #[test]
    fn spread_ratio_fixtures() {
        let real = cloud(100, 1.0, 8);
        let r = variance_ratio(&real, &real).unwrap();
        assert_eq!((r.variance_ratio, r.distance_ratio), (1.0, 1.0));
        let n = real.len() as f64;
        let mean: Vec<f64> = (0..2).map(|j| real.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let half: Vec<Vec<f64>> = real
            .iter()
            .map(|x| x.iter().zip(&mean).map(|(v, m)| m + 0.5 * (v - m)).collect())
            .collect();
        let r = variance_ratio(&real, &half).unwrap();
        assert!((r.variance_ratio - 0.25).abs() < 1e-12);
        assert!((r.distance_ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantile_and_knn() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[5.0], 0.99).unwrap(), 5.0);
        let pts = vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        assert_eq!(kth_nn_distances(&pts, &pts, 1, true), vec![1.0, 1.0, 2.0, 4.0]);
        assert_eq!(kth_nn_distances(&pts, &pts, 2, true), vec![3.0, 2.0, 3.0, 6.0]);
        assert_eq!(kth_nn_distances(&pts, &pts, 1, false), vec![0.0; 4]);
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.9, 1.0], 2).unwrap();
        assert_eq!(h, vec![(0.25, 2), (0.75, 2)]);
        assert_eq!(histogram(&[2.0, 2.0], 3).unwrap()[0].1, 2);
    }

    proptest! {
        #[test]
        fn rate_is_monotone_in_threshold(d in prop::collection::vec(0.0f64..5.0, 1..50), a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(memorization_rate(&d, lo) <= memorization_rate(&d, hi));
        }

        #[test]
        fn coverage_ignores_order(seed in 0u64..1000, rot in 0usize..40) {
            let real = cloud(40, 0.0, seed);
            let gen = cloud(30, 0.7, seed + 1);
            let base = coverage(&real, &gen, 3, 90.0).unwrap();
            let mut r2 = real.clone();
            r2.rotate_left(rot);
            r2.reverse();
            let mut g2 = gen.clone();
            g2.rotate_left(rot % 30);
            prop_assert_eq!(base, coverage(&r2, &g2, 3, 90.0).unwrap());
        }
    }
}
