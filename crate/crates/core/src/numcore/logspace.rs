use crate::error::{Error, Result};

/// `log Σ exp(v_i)` by max-shift. Entries may be `-inf`, but not all of them.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty sequence".into()));
    }
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Domain("log_sum_exp input contains NaN or +inf".into()));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Domain("log_sum_exp: every entry is -inf".into()));
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let z = log_sum_exp(v)?;
    Ok(v.iter().map(|&x| x - z).collect())
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(v)?.into_iter().map(f64::exp).collect())
}
