//! Class-conditional oracles `p(x | y)` with exact log-densities.
//!
//! Two families are provided: an analytic diagonal-Gaussian oracle (optionally
//! a per-class mixture of diagonal components) and a per-class affine-coupling
//! flow trained by maximum likelihood. Both are exposed through [`Oracle`].

mod flow;
mod gaussian;
mod serialize;

use serde::{Deserialize, Serialize};

pub use flow::{train_mle, ClassFlow, CouplingLayer, FlowConfig, FlowOracle, FlowTrainConfig, NllTrace, TwoLayerNet};
pub use gaussian::{DiagGaussian, GaussianClass, GaussianOracle};
pub use serialize::FORMAT_VERSION;

use crate::error::{contract, Error, Result};
use crate::inference::PosteriorVector;
use crate::numcore::{RngStream, Tensor};

/// Class prior `π`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassPrior {
    probs: Vec<f64>,
}

impl ClassPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return contract("class prior needs at least one class");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return contract(format!("class prior entries must be finite and >= 0: {probs:?}"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return contract(format!("class prior sums to {s}, not 1"));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// Normalizes non-negative weights into a prior.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return contract("prior weights must be non-negative with positive sum");
        }
        Ok(Self {
            probs: w.iter().map(|v| v / s).collect(),
        })
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

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.probs.len() as f64;
        self.probs.iter().all(|p| (p - u).abs() <= 1e-12)
    }
}

impl TryFrom<Vec<f64>> for ClassPrior {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassPrior> for Vec<f64> {
    fn from(p: ClassPrior) -> Self {
        p.probs
    }
}

/// Input vector with its class and, once inferred, its exact posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub posterior: Option<PosteriorVector>,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y, posterior: None }
    }
}

/// A frozen or trainable class-conditional world.
#[derive(Debug, Clone, PartialEq)]
pub enum Oracle {
    Gaussian(GaussianOracle),
    Flow(FlowOracle),
}

impl Oracle {
    pub fn num_classes(&self) -> usize {
        self.prior().len()
    }

    pub fn dim(&self) -> usize {
        match self {
            Oracle::Gaussian(g) => g.dim(),
            Oracle::Flow(f) => f.dim(),
        }
    }

    pub fn prior(&self) -> &ClassPrior {
        match self {
            Oracle::Gaussian(g) => g.prior(),
            Oracle::Flow(f) => f.prior(),
        }
    }

    /// Same densities under a different class prior.
    pub fn with_prior(&self, prior: ClassPrior) -> Result<Self> {
        if prior.len() != self.num_classes() {
            return contract("with_prior: class count mismatch");
        }
        Ok(match self {
            Oracle::Gaussian(g) => Oracle::Gaussian(g.with_prior(prior)),
            Oracle::Flow(f) => Oracle::Flow(f.with_prior(prior)),
        })
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            Oracle::Gaussian(_) => true,
            Oracle::Flow(f) => f.is_frozen(),
        }
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.num_classes() {
            return contract(format!("class {k} out of range for K={}", self.num_classes()));
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return contract(format!(
                "input has dimension {}, oracle expects {}",
                x.len(),
                self.dim()
            ));
        }
        Ok(())
    }

    /// `log p(x | y = k)`.
    pub fn log_likelihood(&self, x: &[f64], k: usize) -> Result<f64> {
        self.check_dim(x)?;
        self.check_class(k)?;
        match self {
            Oracle::Gaussian(g) => Ok(g.log_likelihood(x, k)),
            Oracle::Flow(f) => f.log_likelihood(x, k),
        }
    }

    /// Per-class log-likelihoods of one input.
    pub fn log_likelihoods(&self, x: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_classes()).map(|k| self.log_likelihood(x, k)).collect()
    }

    /// Row-per-sample matrix `[n, K]` of log-likelihoods for a batch.
    pub fn log_likelihood_matrix(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            Oracle::Gaussian(_) => xs.iter().map(|x| self.log_likelihoods(x)).collect(),
            Oracle::Flow(f) => {
                if xs.is_empty() {
                    return Ok(Vec::new());
                }
                for x in xs {
                    self.check_dim(x)?;
                }
                let batch = Tensor::from_rows(xs)?;
                let mut out = vec![Vec::with_capacity(self.num_classes()); xs.len()];
                for k in 0..self.num_classes() {
                    for (row, v) in out.iter_mut().zip(f.log_likelihood_batch(&batch, k)?) {
                        row.push(v);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Draw from `p(x | y = k)`. Flow oracles must be frozen.
    pub fn sample(&self, k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.check_class(k)?;
        match self {
            Oracle::Gaussian(g) => Ok(g.sample(k, rng)),
            Oracle::Flow(f) => f.sample(k, rng),
        }
    }

    /// `n` draws from class `k`.
    pub fn sample_class(&self, k: usize, n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        self.check_class(k)?;
        match self {
            Oracle::Gaussian(g) => Ok((0..n).map(|_| g.sample(k, rng)).collect()),
            Oracle::Flow(f) => f.sample_batch(k, n, rng),
        }
    }

    /// `n` draws from the joint `π_y p(x | y)`, labels drawn independently per sample.
    pub fn sample_labeled(&self, n: usize, rng: &mut RngStream) -> Result<Vec<LabeledSample>> {
        let probs = self.prior().probs().to_vec();
        (0..n)
            .map(|_| {
                let y = rng.categorical(&probs);
                Ok(LabeledSample::new(self.sample(y, rng)?, y))
            })
            .collect()
    }

    /// Log-density of the joint mixture `log Σ_k π_k p(x | k)`.
    pub fn mixture_log_density(&self, x: &[f64]) -> Result<f64> {
        let ll = self.log_likelihoods(x)?;
        let terms: Vec<f64> = ll.iter().zip(self.prior().probs()).map(|(l, p)| l + p.ln()).collect();
        crate::numcore::log_sum_exp(&terms)
    }

    pub fn to_json(&self) -> Result<String> {
        serialize::to_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serialize::from_json(s)
    }
}

/// Uniform dequantization of integer levels into `[-1, 1]`:
/// `x = 2 (v + u) / levels - 1`, `u ~ U[0, 1)`.
pub fn dequantize(levels: &[u32], num_levels: u32, rng: &mut RngStream) -> Result<Vec<f64>> {
    if num_levels == 0 {
        return contract("dequantize: number of levels must be positive");
    }
    levels
        .iter()
        .map(|&v| {
            if v >= num_levels {
                return contract(format!("dequantize: level {v} >= {num_levels}"));
            }
            Ok(2.0 * (v as f64 + rng.uniform()) / num_levels as f64 - 1.0)
        })
        .collect()
}
