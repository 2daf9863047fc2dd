//! Scalar/vector loss primitives shared by the graph ops and the analysis code.

use crate::error::{Error, Result};

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input".into()));
    }
    check_finite(v, "softmax input")?;
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `-log softmax(logits)[target]`.
pub fn categorical_ce_with_logits(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    check_finite(logits, "categorical_ce_with_logits")?;
    Ok((log_sum_exp(logits) - logits[target]).max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_unchecked(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(logit)` against a 0/1 target.
pub fn binary_ce_with_logit(logit: f64, target: f64) -> Result<f64> {
    if target != 0.0 && target != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "binary target must be 0 or 1, got {target}"
        )));
    }
    if !logit.is_finite() {
        return Err(Error::NonFinite("binary_ce_with_logit".into()));
    }
    Ok(bce_unchecked(logit, target))
}
