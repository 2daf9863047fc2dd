use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateTrace, Trace};
use crate::numerics::{binary_ce_with_logit, categorical_ce_with_logits, Graph, Tensor, Var};

/// Mean next-token cross-entropy: row `t` of `logits` scored against
/// `targets[t]`.
pub fn lm_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "lm_loss: logits {:?} with {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        total += categorical_ce_with_logits(logits.row(r), t)?;
    }
    Ok(total / targets.len() as f64)
}

/// Mean over token positions of `BCE(sigmoid(logit), 1)`.
pub fn aux_router_loss(router_logits: &[f64]) -> Result<f64> {
    if router_logits.is_empty() {
        return Err(Error::Empty("aux_router_loss needs at least one token".into()));
    }
    let mut total = 0.0;
    for &x in router_logits {
        total += binary_ce_with_logit(x, 1.0)?;
    }
    Ok(total / router_logits.len() as f64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `alpha·lm + (1 − alpha)·aux`.
pub fn combined_preopt_loss(lm: f64, aux: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * lm + (1.0 - alpha) * aux)
}

/// `n · Σ f_i · P_i` for dispatch fractions `f` and mean router
/// probabilities `P`.
pub fn load_balance_loss(dispatch: &[f64], mean_probs: &[f64], n: usize) -> Result<f64> {
    if dispatch.len() != n || mean_probs.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "load_balance_loss: n = {n}, |f| = {}, |P| = {}",
            dispatch.len(),
            mean_probs.len()
        )));
    }
    for (what, v) in [("dispatch fractions", dispatch), ("router probabilities", mean_probs)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("{what} sum to {s}, not 1")));
        }
    }
    Ok(n as f64 * dispatch.iter().zip(mean_probs).map(|(f, p)| f * p).sum::<f64>())
}

/// Fraction of (token, selected slot) pairs sent to each expert.
pub fn dispatch_fractions(mask: &[bool], n_experts: usize, k: usize) -> Vec<f64> {
    let rows = mask.len() / n_experts;
    let mut counts = vec![0.0; n_experts];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            counts[i % n_experts] += 1.0;
        }
    }
    let denom = (rows * k) as f64;
    counts.into_iter().map(|c| c / denom).collect()
}

/// Loss components of one step. `total` follows the documented combination
/// for the mode that produced it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub aux: f64,
    pub load_balance: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn dense(lm: f64) -> Self {
        LossBreakdown {
            lm,
            total: lm,
            ..Default::default()
        }
    }

    pub fn preopt(lm: f64, aux: f64, alpha: f64) -> Self {
        LossBreakdown {
            lm,
            aux,
            load_balance: 0.0,
            total: alpha * lm + (1.0 - alpha) * aux,
        }
    }

    pub fn posttrain(lm: f64, load_balance: f64, coeff: f64) -> Self {
        LossBreakdown {
            lm,
            aux: 0.0,
            load_balance,
            total: lm + coeff * load_balance,
        }
    }
}

/// Next-token cross-entropy over every position that has a successor.
pub fn lm_loss_graph(g: &mut Graph, trace: &Trace) -> Result<Var> {
    let (rows, targets) = trace.next_token_pairs();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("sequences need at least 2 tokens".into()));
    }
    let picked = g.gather_rows(trace.logits, &rows)?;
    g.cross_entropy(picked, &targets)
}

/// Switch-style balance term of one mixture layer, with the dispatch
/// fractions treated as constants.
pub fn load_balance_graph(g: &mut Graph, gate: &GateTrace) -> Result<Var> {
    let n = g.value(gate.scores).cols();
    let f = dispatch_fractions(&gate.mask, n, gate.k);
    let probs = g.row_softmax(gate.scores)?;
    let mean = g.mean_rows(probs)?;
    let f = g.input(Tensor::new(vec![1, n], f)?);
    let prod = g.mul(mean, f)?;
    let s = g.sum(prod);
    Ok(g.scale(s, n as f64))
}

/// Mean of [`load_balance_graph`] over all mixture layers.
pub fn mean_load_balance_graph(g: &mut Graph, gates: &[GateTrace]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for gate in gates {
        let lb = load_balance_graph(g, gate)?;
        acc = Some(match acc {
            None => lb,
            Some(a) => g.add(a, lb)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Empty("no mixture layers".into()))?;
    Ok(g.scale(acc, 1.0 / gates.len() as f64))
}

/// Mean `BCE(sigmoid(h·r), 1)` over every token of every layer, with one
/// routing vector per layer.
pub fn aux_loss_graph(g: &mut Graph, hidden: &[Var], vectors: &[Var]) -> Result<Var> {
    if hidden.len() != vectors.len() || hidden.is_empty() {
        return Err(Error::Shape(format!(
            "{} hidden states for {} routing vectors",
            hidden.len(),
            vectors.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&h, &r) in hidden.iter().zip(vectors) {
        let d = g.value(r).numel();
        let col = g.reshape(r, &[d, 1])?;
        let logits = g.matmul(h, col)?;
        let n = g.value(logits).numel();
        let bce = g.bce_with_logits(logits, &vec![1.0; n])?;
        acc = Some(match acc {
            None => bce,
            Some(a) => g.add(a, bce)?,
        });
    }
    let acc = acc.expect("non-empty");
    Ok(g.scale(acc, 1.0 / hidden.len() as f64))
}

/// `alpha·lm + (1 − alpha)·aux` on the graph.
pub fn combined_graph(g: &mut Graph, lm: Var, aux: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = g.scale(lm, alpha);
    let b = g.scale(aux, 1.0 - alpha);
    g.add(a, b)
}
