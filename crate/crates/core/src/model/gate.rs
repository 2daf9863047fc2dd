use super::config::GateMode;
use crate::error::{Error, Result};
use crate::numerics::{ops::softmax_in_place, Tensor};

/// Indices of the `k` largest scores in ascending index order. Equal scores
/// prefer the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Top-k selection with softmax over the selected scores.
pub fn top_k_gate(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    top_k_gate_with(scores, k, GateMode::TopKSoftmax)
}

pub fn top_k_gate_with(scores: &[f64], k: usize, mode: GateMode) -> Result<(Vec<usize>, Vec<f64>)> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("gate scores".into()));
    }
    let idx = top_k_indices(scores, k)?;
    let weights = match mode {
        GateMode::TopKSoftmax => {
            let mut w: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            softmax_in_place(&mut w);
            w
        }
        GateMode::SoftmaxThenTopK => {
            let mut all = scores.to_vec();
            softmax_in_place(&mut all);
            idx.iter().map(|&i| all[i]).collect()
        }
    };
    Ok((idx, weights))
}

/// Row-major top-k membership mask for a `[rows × n]` score matrix.
pub fn top_k_mask(scores: &Tensor, k: usize) -> Result<Vec<bool>> {
    let n = scores.cols();
    let mut mask = vec![false; scores.numel()];
    for r in 0..scores.rows() {
        for i in top_k_indices(scores.row(r), k)? {
            mask[r * n + i] = true;
        }
    }
    Ok(mask)
}
