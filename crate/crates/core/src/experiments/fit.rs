//! Least squares, log-log power-law fits and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ols {
    pub slope: f64,
    pub intercept: f64,
    /// Zero when the response has no variance.
    pub r2: f64,
    pub stderr_slope: f64,
    pub n: usize,
}

/// Simple linear regression of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<Ols> {
    if x.len() != y.len() {
        return contract("ols: x and y differ in length");
    }
    let n = x.len();
    if n < 2 {
        return contract("ols: need at least two points");
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return contract("ols: non-finite input");
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return contract("ols: x has no variance");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 {
        0.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    let stderr_slope = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(Ols {
        slope,
        intercept,
        r2,
        stderr_slope,
        n,
    })
}

/// `value ≈ c · N^(-alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub c: f64,
    pub r2: f64,
    pub stderr_alpha: f64,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.c * n.powf(-self.alpha)
    }
}

/// OLS of `ln value` on `ln N`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return contract(format!("power-law fit needs at least 3 points, got {}", points.len()));
    }
    if let Some((n, v)) = points.iter().find(|(n, v)| !(*n > 0.0) || !(*v > 0.0)) {
        return contract(format!("power-law fit needs positive N and values, got ({n}, {v})"));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let o = ols(&lx, &ly)?;
    Ok(PowerLawFit {
        alpha: -o.slope,
        c: o.intercept.exp(),
        r2: o.r2,
        stderr_alpha: o.stderr_slope,
    })
}

/// Values below this are treated as a saturated classifier and left out of fits.
pub const MIN_FIT_VALUE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredFit {
    pub fit: PowerLawFit,
    pub excluded: Vec<(f64, f64)>,
}

/// Power-law fit over the points with value `>= min_value`.
pub fn fit_power_law_filtered(points: &[(f64, f64)], min_value: f64) -> Result<FilteredFit> {
    let (kept, excluded): (Vec<_>, Vec<_>) = points.iter().partition(|p| p.1 >= min_value);
    Ok(FilteredFit {
        fit: fit_power_law(&kept)?,
        excluded,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their mean rank
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return contract("spearman: need two equal-length series of at least 2 points");
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let m = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let vx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return contract("spearman: constant series");
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;
    use proptest::prelude::*;

    #[test]
    fn planted_law_is_exact() {
        let pts: Vec<_> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&n: &f64| (n, 2.0 * n.powf(-0.5)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.alpha - 0.5).abs() < 1e-10);
        assert!((f.c - 2.0).abs() < 1e-10);
        assert!((f.r2 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_response() {
        let f = fit_power_law(&[(10.0, 0.3), (20.0, 0.3), (40.0, 0.3)]).unwrap();
        assert_eq!(f.alpha, 0.0);
        assert_eq!(f.r2, 0.0);
    }

    #[test]
    fn rejects_bad_points() {
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 0.2)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, -1.0), (3.0, 0.2)]).is_err());
    }

    #[test]
    fn filtered_fit_records_exclusions() {
        let pts = [(10.0, 1.0), (100.0, 0.1), (1000.0, 0.01), (10000.0, 1e-10)];
        let f = fit_power_law_filtered(&pts, MIN_FIT_VALUE).unwrap();
        assert_eq!(f.excluded, vec![(10000.0, 1e-10)]);
        assert!((f.fit.alpha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_mobilenet_exponent_recovered() {
        let mut rng = RngStream::new(11, 0);
        let mut pts = Vec::new();
        for _seed in 0..3 {
            for i in 0..8 {
                let n = 100.0 * 2f64.powi(i);
                pts.push((n, 0.8 * n.powf(-0.135) * (1.0 + 0.05 * rng.normal())));
            }
        }
        let f = fit_power_law(&pts).unwrap();
        assert!((f.alpha - 0.135).abs() < 3.0 * f.stderr_alpha, "{f:?}");
    }

    #[test]
    fn spearman_fixtures() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // hand-computed with tied ranks: x ranks 1,2.5,2.5,4; y ranks 1,2,3,4
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ols_line() {
        let o = ols(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!((o.slope - 2.0).abs() < 1e-14 && (o.intercept - 1.0).abs() < 1e-14);
        assert!(o.stderr_slope < 1e-12);
    }

    proptest! {
        #[test]
        fn scale_equivariance(vals in prop::collection::vec(1e-3f64..10.0, 4..10), k in 1e-3f64..1e3) {
            let pts: Vec<_> = vals.iter().enumerate().map(|(i, v)| ((i + 1) as f64 * 17.0, *v)).collect();
            let scaled: Vec<_> = pts.iter().map(|(n, v)| (*n, v * k)).collect();
            let (a, b) = (fit_power_law(&pts).unwrap(), fit_power_law(&scaled).unwrap());
            prop_assert!((a.alpha - b.alpha).abs() < 1e-12);
            prop_assert!((a.r2 - b.r2).abs() < 1e-12);
            prop_assert!((b.c / a.c - k).abs() < 1e-9 * k);
        }
    }
}
