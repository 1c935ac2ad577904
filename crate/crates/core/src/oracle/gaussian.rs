use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::ClassPrior;
use crate::error::{contract, Result};
use crate::numcore::{log_sum_exp, RngStream};

/// Diagonal normal component `N(mean, diag(var))` with a mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagGaussian {
    #[serde(default = "one")]
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self { weight: 1.0, mean, var }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(&self.mean).zip(&self.var) {
            let d = xi - m;
            acc += -0.5 * d * d / v - 0.5 * (2.0 * PI * v).ln();
        }
        acc
    }

    /// Same component convolved with isotropic `N(0, sigma^2 I)` noise.
    pub fn widened(&self, sigma: f64) -> Self {
        Self {
            weight: self.weight,
            mean: self.mean.clone(),
            var: self.var.iter().map(|v| v + sigma * sigma).collect(),
        }
    }
}

/// Class density: a weighted mixture of diagonal components (one for the
/// plain Gaussian oracle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianClass {
    pub components: Vec<DiagGaussian>,
}

impl GaussianClass {
    fn log_density(&self, x: &[f64]) -> f64 {
        if let [c] = self.components.as_slice() {
            return c.log_density(x);
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| (c.weight / total).ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms).expect("component weights are positive")
    }
}

/// Analytic oracle with closed-form class densities.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    prior: ClassPrior,
    classes: Vec<GaussianClass>,
    dim: usize,
}

impl GaussianOracle {
    pub fn new(prior: ClassPrior, classes: Vec<GaussianClass>) -> Result<Self> {
        if classes.len() != prior.len() {
            return contract(format!(
                "{} class densities for a prior over {} classes",
                classes.len(),
                prior.len()
            ));
        }
        let Some(dim) = classes.first().and_then(|c| c.components.first()).map(|c| c.mean.len()) else {
            return contract("gaussian oracle needs at least one component");
        };
        if dim == 0 {
            return contract("gaussian oracle dimension must be positive");
        }
        for (k, c) in classes.iter().enumerate() {
            if c.components.is_empty() {
                return contract(format!("class {k} has no components"));
            }
            for comp in &c.components {
                if comp.mean.len() != dim || comp.var.len() != dim {
                    return contract(format!("class {k}: component dimension mismatch"));
                }
                if comp.var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return contract(format!("class {k}: variances must be positive"));
                }
                if comp.mean.iter().any(|m| !m.is_finite()) {
                    return contract(format!("class {k}: non-finite mean"));
                }
                if !(comp.weight > 0.0) || !comp.weight.is_finite() {
                    return contract(format!("class {k}: component weights must be positive"));
                }
            }
        }
        Ok(Self { prior, classes, dim })
    }

    /// One diagonal normal per class.
    pub fn diagonal(prior: ClassPrior, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        if means.len() != vars.len() {
            return contract("means and variances differ in class count");
        }
        let classes = means
            .into_iter()
            .zip(vars)
            .map(|(m, v)| GaussianClass {
                components: vec![DiagGaussian::new(m, v)],
            })
            .collect();
        Self::new(prior, classes)
    }

    pub fn prior(&self) -> &ClassPrior {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[GaussianClass] {
        &self.classes
    }

    pub fn with_prior(&self, prior: ClassPrior) -> Self {
        Self { prior, ..self.clone() }
    }

    /// Oracle of `x + ε`, `ε ~ N(0, σ² I)`, without clipping.
    pub fn convolved(&self, sigma: f64) -> Self {
        Self {
            prior: self.prior.clone(),
            dim: self.dim,
            classes: self
                .classes
                .iter()
                .map(|c| GaussianClass {
                    components: c.components.iter().map(|g| g.widened(sigma)).collect(),
                })
                .collect(),
        }
    }

    pub(crate) fn log_likelihood(&self, x: &[f64], k: usize) -> f64 {
        self.classes[k].log_density(x)
    }

    pub(crate) fn sample(&self, k: usize, rng: &mut RngStream) -> Vec<f64> {
        let comps = &self.classes[k].components;
        let comp = if comps.len() == 1 {
            &comps[0]
        } else {
            let w: Vec<f64> = comps.iter().map(|c| c.weight).collect();
            &comps[rng.categorical(&w)]
        };
        comp.mean
            .iter()
            .zip(&comp.var)
            .map(|(m, v)| m + v.sqrt() * rng.normal())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal_1d() -> GaussianOracle {
        GaussianOracle::diagonal(ClassPrior::uniform(1), vec![vec![0.0]], vec![vec![1.0]]).unwrap()
    }

    #[test]
    fn standard_normal_mode() {
        let g = std_normal_1d();
        let expected = -0.5 * (2.0 * PI).ln();
        assert!((g.log_likelihood(&[0.0], 0) - expected).abs() < 1e-15);
        assert!((expected + 0.918_938_5).abs() < 1e-7);
    }

    #[test]
    fn matches_independent_closed_form() {
        let means = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]];
        let vars = vec![vec![0.5, 2.0, 0.1], vec![1.0, 3.0, 0.25]];
        let g = GaussianOracle::diagonal(ClassPrior::uniform(2), means.clone(), vars.clone()).unwrap();
        let x = [0.1, 0.2, -0.7];
        for k in 0..2 {
            // product of 1-D normal pdfs, then log
            let pdf: f64 = (0..3)
                .map(|d| {
                    let s2 = vars[k][d];
                    (-(x[d] - means[k][d]).powi(2) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt()
                })
                .product();
            assert!((g.log_likelihood(&x, k) - pdf.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_class_density() {
        let class = GaussianClass {
            components: vec![
                DiagGaussian {
                    weight: 3.0,
                    mean: vec![-1.0],
                    var: vec![1.0],
                },
                DiagGaussian {
                    weight: 1.0,
                    mean: vec![2.0],
                    var: vec![0.5],
                },
            ],
        };
        let g = GaussianOracle::new(ClassPrior::uniform(1), vec![class]).unwrap();
        let x = 0.4f64;
        let n = |m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        let expected = (0.75 * n(-1.0, 1.0) + 0.25 * n(2.0, 0.5)).ln();
        assert!((g.log_likelihood(&[x], 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let p = ClassPrior::uniform(1);
        assert!(GaussianOracle::diagonal(p.clone(), vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(GaussianOracle::diagonal(p.clone(), vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
        assert!(GaussianOracle::diagonal(ClassPrior::uniform(2), vec![vec![0.0]], vec![vec![1.0]]).is_err());
    }
}
