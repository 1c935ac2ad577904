//! Exact Bayes posteriors under an oracle and the split of a classifier's
//! cross-entropy into aleatoric entropy and epistemic KL.
//!
//! For a sample `x` with true posterior `p = p(·|x)` and model output `q`:
//!
//! ```text
//! CE(p, q) = -Σ p ln q = H(p) + KL(p ‖ q)
//! ```
//!
//! Averaging over an evaluation set gives the decomposition reported by
//! [`decompose`]. The entropy term depends on the oracle only, so it is the
//! floor no classifier can go below.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numcore::{log_sum_exp, RngStream};
use crate::oracle::{ClassPrior, LabeledSample, Oracle};

/// Probabilities below this are floored before taking logs of a model output.
pub const Q_FLOOR: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PosteriorVector {
    probs: Vec<f64>,
}

impl PosteriorVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return contract("posterior vector is empty");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain(format!("posterior entries must be >= 0: {probs:?}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::Domain(format!("posterior sums to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, at: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[at] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

impl TryFrom<Vec<f64>> for PosteriorVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PosteriorVector> for Vec<f64> {
    fn from(p: PosteriorVector) -> Self {
        p.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorConfig {
    pub prior: ClassPrior,
    /// Divides the log-likelihoods (not the log-prior).
    pub temperature: f64,
}

impl PosteriorConfig {
    pub fn new(prior: ClassPrior) -> Self {
        Self {
            prior,
            temperature: 1.0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }
}

/// `p(k | x) ∝ exp(ll_k / T) π_k`, normalized in the log domain.
pub fn bayes_posterior(logliks: &[f64], cfg: &PosteriorConfig) -> Result<PosteriorVector> {
    let t = cfg.temperature;
    if !(t > 0.0) || !t.is_finite() {
        return contract(format!("posterior temperature must be positive and finite, got {t}"));
    }
    if logliks.len() != cfg.prior.len() {
        return contract(format!(
            "{} log-likelihoods for a {}-class prior",
            logliks.len(),
            cfg.prior.len()
        ));
    }
    let joint: Vec<f64> = logliks
        .iter()
        .zip(cfg.prior.probs())
        .map(|(&l, &p)| l / t + p.ln())
        .collect();
    let z = log_sum_exp(&joint)?;
    let probs: Vec<f64> = joint.iter().map(|&j| (j - z).exp()).collect();
    // exp of log-normalized terms sums to 1 up to rounding; renormalize the residue
    let s: f64 = probs.iter().sum();
    PosteriorVector::new(probs.into_iter().map(|p| p / s).collect())
}

/// `H(p) = -Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &PosteriorVector) -> f64 {
    -p.probs.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Floor `q` at [`Q_FLOOR`] and renormalize. Returns whether flooring changed anything.
pub fn floor_model_output(q: &PosteriorVector) -> (Vec<f64>, bool) {
    if q.probs.iter().all(|&v| v >= Q_FLOOR) {
        return (q.probs.clone(), false);
    }
    let floored: Vec<f64> = q.probs.iter().map(|&v| v.max(Q_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    (floored.into_iter().map(|v| v / s).collect(), true)
}

fn check_same_support(p: &PosteriorVector, q: &PosteriorVector) {
    assert_eq!(p.len(), q.len(), "posterior vectors over different class counts");
}

/// `KL(p ‖ q)` in nats, with the flag set when `q` had to be floored.
pub fn kl_flagged(p: &PosteriorVector, q: &PosteriorVector) -> (f64, bool) {
    check_same_support(p, q);
    let (qf, floored) = floor_model_output(q);
    let v = p
        .probs
        .iter()
        .zip(&qf)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>();
    (v.max(0.0), floored)
}

pub fn kl(p: &PosteriorVector, q: &PosteriorVector) -> f64 {
    kl_flagged(p, q).0
}

/// `-Σ p ln q` with the same flooring as [`kl`].
pub fn cross_entropy(p: &PosteriorVector, q: &PosteriorVector) -> f64 {
    check_same_support(p, q);
    let (qf, _) = floor_model_output(q);
    -p.probs
        .iter()
        .zip(&qf)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * qi.ln())
        .sum::<f64>()
}

/// Anything that outputs a distribution over classes for an input.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Result<PosteriorVector>;

    fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<PosteriorVector>> {
        xs.iter().map(|x| self.predict_proba(x)).collect()
    }
}

/// The oracle's own posterior as a predictor (the Bayes-optimal model).
#[derive(Debug, Clone)]
pub struct OraclePredictor<'a> {
    oracle: &'a Oracle,
    cfg: PosteriorConfig,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(oracle: &'a Oracle) -> Self {
        Self {
            oracle,
            cfg: PosteriorConfig::new(oracle.prior().clone()),
        }
    }

    pub fn with_config(oracle: &'a Oracle, cfg: PosteriorConfig) -> Self {
        Self { oracle, cfg }
    }
}

impl Predictor for OraclePredictor<'_> {
    fn num_classes(&self) -> usize {
        self.oracle.num_classes()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<PosteriorVector> {
        bayes_posterior(&self.oracle.log_likelihoods(x)?, &self.cfg)
    }

    fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<PosteriorVector>> {
        self.oracle
            .log_likelihood_matrix(xs)?
            .iter()
            .map(|ll| bayes_posterior(ll, &self.cfg))
            .collect()
    }
}

/// Exact posterior of one input under the oracle's own prior.
pub fn oracle_posterior(oracle: &Oracle, x: &[f64]) -> Result<PosteriorVector> {
    OraclePredictor::new(oracle).predict_proba(x)
}

/// Fill in exact posteriors, evaluating `shard_size` samples per batch.
///
/// Shards are independent reads of the frozen oracle and run in parallel;
/// results land back in sample order, so the output does not depend on
/// scheduling.
pub fn annotate_posteriors(
    oracle: &Oracle,
    samples: &mut [LabeledSample],
    cfg: &PosteriorConfig,
    shard_size: usize,
) -> Result<()> {
    let shard_size = shard_size.max(1);
    samples.par_chunks_mut(shard_size).try_for_each(|shard| -> Result<()> {
        let xs: Vec<Vec<f64>> = shard.iter().map(|s| s.x.clone()).collect();
        let lls = oracle.log_likelihood_matrix(&xs)?;
        for (s, ll) in shard.iter_mut().zip(lls) {
            s.posterior = Some(bayes_posterior(&ll, cfg)?);
        }
        Ok(())
    })
}

/// Default shard size for posterior annotation.
pub const DEFAULT_SHARD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleTerms {
    pub entropy: f64,
    pub kl: f64,
}

/// Mean cross-entropy against the true posterior and its two components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n: usize,
    pub total_ce: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub se_aleatoric: f64,
    pub se_epistemic: f64,
    /// Number of samples whose model output needed flooring.
    #[serde(skip)]
    pub floored: usize,
    #[serde(skip)]
    pub per_sample: Vec<SampleTerms>,
}

impl DecompositionReport {
    /// `|total - (aleatoric + epistemic)|` relative to `max(1, total)`.
    pub fn identity_residual(&self) -> f64 {
        (self.total_ce - (self.aleatoric + self.epistemic)).abs() / self.total_ce.max(1.0)
    }

    /// The JSON interface: `{n, total_ce, aleatoric, epistemic, se_aleatoric, se_epistemic}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Decomposition from already-paired `(p, q)` vectors.
pub fn decompose_pairs(pairs: &[(PosteriorVector, PosteriorVector)]) -> Result<DecompositionReport> {
    if pairs.is_empty() {
        return contract("decompose: empty evaluation set");
    }
    let mut ce = Vec::with_capacity(pairs.len());
    let mut per_sample = Vec::with_capacity(pairs.len());
    let mut floored = 0;
    for (p, q) in pairs {
        if p.len() != q.len() {
            return contract("decompose: model and oracle disagree on K");
        }
        let (k, f) = kl_flagged(p, q);
        floored += usize::from(f);
        ce.push(cross_entropy(p, q));
        per_sample.push(SampleTerms {
            entropy: entropy(p),
            kl: k,
        });
    }
    let ent: Vec<f64> = per_sample.iter().map(|s| s.entropy).collect();
    let kls: Vec<f64> = per_sample.iter().map(|s| s.kl).collect();
    let (aleatoric, se_aleatoric) = mean_and_se(&ent);
    let (epistemic, se_epistemic) = mean_and_se(&kls);
    let (total_ce, _) = mean_and_se(&ce);
    Ok(DecompositionReport {
        n: pairs.len(),
        total_ce,
        aleatoric,
        epistemic,
        se_aleatoric,
        se_epistemic,
        floored,
        per_sample,
    })
}

/// Decompose `model`'s cross-entropy on an evaluation set whose samples
/// carry exact oracle posteriors.
pub fn decompose(eval: &[LabeledSample], model: &dyn Predictor) -> Result<DecompositionReport> {
    let truth = eval
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.posterior
                .clone()
                .ok_or_else(|| Error::Contract(format!("decompose: sample {i} has no oracle posterior")))
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<Vec<f64>> = eval.iter().map(|s| s.x.clone()).collect();
    let pairs: Vec<_> = truth.into_iter().zip(model.predict_batch(&xs)?).collect();
    decompose_pairs(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesAccuracy {
    pub n: usize,
    pub bayes_acc: f64,
    pub bayes_err: f64,
    /// Standard error of `bayes_acc` (and of `bayes_err`).
    pub se_acc: f64,
    /// Mean posterior entropy, nats.
    pub aleatoric_floor: f64,
    pub se_floor: f64,
}

/// Draws from the mixture `Σ_k π_k p(·|k)` with their exact posteriors.
fn mixture_posteriors(oracle: &Oracle, n: usize, rng: &mut RngStream) -> Result<Vec<PosteriorVector>> {
    let mut samples = oracle.sample_labeled(n, rng)?;
    annotate_posteriors(
        oracle,
        &mut samples,
        &PosteriorConfig::new(oracle.prior().clone()),
        DEFAULT_SHARD,
    )?;
    Ok(samples.into_iter().filter_map(|s| s.posterior).collect())
}

/// Monte-Carlo Bayes accuracy `E[max_k p(k|x)]` and aleatoric floor `E[H(p(·|x))]`.
pub fn bayes_accuracy(oracle: &Oracle, mc_samples: usize, rng: &mut RngStream) -> Result<BayesAccuracy> {
    if !oracle.is_frozen() {
        return contract("bayes_accuracy requires a frozen oracle");
    }
    if mc_samples == 0 {
        return contract("bayes_accuracy needs at least one sample");
    }
    let post = mixture_posteriors(oracle, mc_samples, rng)?;
    let maxes: Vec<f64> = post.iter().map(PosteriorVector::max_prob).collect();
    let ents: Vec<f64> = post.iter().map(entropy).collect();
    let (acc, se_acc) = mean_and_se(&maxes);
    let (floor, se_floor) = mean_and_se(&ents);
    Ok(BayesAccuracy {
        n: mc_samples,
        bayes_acc: acc,
        bayes_err: 1.0 - acc,
        se_acc,
        aleatoric_floor: floor,
        se_floor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualInformation {
    pub mi_bits: f64,
    pub se_bits: f64,
    /// `I(X;Y) / H(π)`; zero when the prior is degenerate.
    pub nmi: f64,
    pub prior_entropy_bits: f64,
}

/// `I(X;Y) = H(π) - E_x[H(p(·|x))]`, in bits.
pub fn mutual_information(oracle: &Oracle, mc_samples: usize, rng: &mut RngStream) -> Result<MutualInformation> {
    let b = bayes_accuracy(oracle, mc_samples, rng)?;
    let h_prior = entropy(&PosteriorVector::new(oracle.prior().probs().to_vec())?);
    let ln2 = std::f64::consts::LN_2;
    let mi_bits = (h_prior - b.aleatoric_floor) / ln2;
    let prior_entropy_bits = h_prior / ln2;
    Ok(MutualInformation {
        mi_bits,
        se_bits: b.se_floor / ln2,
        nmi: if prior_entropy_bits > 0.0 {
            mi_bits / prior_entropy_bits
        } else {
            0.0
        },
        prior_entropy_bits,
    })
}
