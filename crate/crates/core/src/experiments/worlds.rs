//! Ready-made Gaussian worlds used by the experiment suites and the example configs.

use crate::error::Result;
use crate::oracle::{ClassPrior, DiagGaussian, GaussianClass, GaussianOracle, Oracle};

fn triangle(radius: f64) -> Vec<Vec<f64>> {
    (0..3)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Three isotropic classes on a triangle; `std` controls the overlap.
pub fn triangle_world(radius: f64, std: f64) -> Result<Oracle> {
    Ok(Oracle::Gaussian(GaussianOracle::diagonal(
        ClassPrior::uniform(3),
        triangle(radius),
        vec![vec![std * std; 2]; 3],
    )?))
}

/// Moderate overlap, used for scaling curves.
pub fn scaling_world() -> Result<Oracle> {
    triangle_world(1.0, 0.5)
}

/// Heavy overlap (aleatoric floor well above 0.2 nats), used for soft labels.
pub fn soft_label_world() -> Result<Oracle> {
    triangle_world(1.0, 0.6)
}

/// Three classes inside `[-1, 1]^2`: two concentric classes of different
/// spread and a third offset one. Prior shifts barely move the decision
/// regions while additive noise blurs the tight class into the wide one.
pub fn shift_world() -> Result<Oracle> {
    let stds = [0.05, 0.25, 0.1];
    Ok(Oracle::Gaussian(GaussianOracle::diagonal(
        ClassPrior::uniform(3),
        vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.6, 0.0]],
        stds.iter().map(|s| vec![s * s; 2]).collect(),
    )?))
}

/// Default share of each class's mass in the ambiguous region.
pub const TWO_REGION_NOISE: f64 = 0.6;

/// Two classes. Region A around (-3, 0) is shared by both classes (posterior
/// exactly one half); region B around (3, 0) is separable and carries
/// `1 - noise_weight` of each class's mass.
pub fn two_region_world(noise_weight: f64) -> Result<Oracle> {
    let noise = DiagGaussian {
        weight: noise_weight,
        mean: vec![-3.0, 0.0],
        var: vec![1.0, 1.0],
    };
    let class = |y: f64| GaussianClass {
        components: vec![
            noise.clone(),
            DiagGaussian {
                weight: 1.0 - noise_weight,
                mean: vec![3.0, y],
                var: vec![0.16, 0.16],
            },
        ],
    };
    Ok(Oracle::Gaussian(GaussianOracle::new(
        ClassPrior::uniform(2),
        vec![class(-1.5), class(1.5)],
    )?))
}
