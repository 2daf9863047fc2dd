//! Parameter naming, initialisation and the block structure shared by the
//! dense and mixture models.

use std::collections::HashMap;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Parameter, RngState, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;

pub mod names {
    pub const EMBED: &str = "embed";
    pub const POS_EMBED: &str = "pos_embed";
    pub const FINAL_NORM: &str = "final_norm";
    pub const LM_HEAD: &str = "lm_head";

    pub fn attn_norm(l: usize) -> String {
        format!("layer.{l}.attn_norm")
    }
    pub fn attn(l: usize, w: &str) -> String {
        format!("layer.{l}.attn.{w}")
    }
    pub fn ffn_norm(l: usize) -> String {
        format!("layer.{l}.ffn_norm")
    }
    /// Prefix of the dense (or shared) FFN in layer `l`.
    pub fn ffn(l: usize) -> String {
        format!("layer.{l}.ffn")
    }
    /// Prefix of expert `i` in mixture layer `l`.
    pub fn expert(l: usize, i: usize) -> String {
        format!("layer.{l}.expert.{i}")
    }
    pub fn router(l: usize) -> String {
        format!("layer.{l}.router")
    }
    pub fn routing_vector(l: usize) -> String {
        format!("layer.{l}.routing_vector")
    }
    pub fn lora_a(prefix: &str, w: &str) -> String {
        format!("{prefix}.{w}.lora_a")
    }
    pub fn lora_b(prefix: &str, w: &str) -> String {
        format!("{prefix}.{w}.lora_b")
    }
}

/// The two projections of every FFN: up (`w1`) and down (`w2`).
pub const FFN_WEIGHTS: [&str; 2] = ["w1", "w2"];

pub(crate) fn backbone_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_h;
    let mut out = vec![
        (names::EMBED.to_string(), vec![cfg.vocab_size, d]),
        (names::POS_EMBED.to_string(), vec![cfg.max_seq, d]),
        (names::FINAL_NORM.to_string(), vec![d]),
        (names::LM_HEAD.to_string(), vec![cfg.vocab_size, d]),
    ];
    for l in 0..cfg.n_layers {
        out.push((names::attn_norm(l), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((names::attn(l, w), vec![d, d]));
        }
        out.push((names::ffn_norm(l), vec![d]));
    }
    out
}

/// `[d_out × d_in]` shape of an FFN projection.
pub(crate) fn ffn_weight_shape(cfg: &ModelConfig, w: &str) -> [usize; 2] {
    match w {
        "w1" => [cfg.d_ff, cfg.d_h],
        _ => [cfg.d_h, cfg.d_ff],
    }
}

pub(crate) fn ffn_shapes(cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    FFN_WEIGHTS
        .iter()
        .map(|w| (format!("{prefix}.{w}"), ffn_weight_shape(cfg, w).to_vec()))
        .collect()
}

pub(crate) fn lora_shapes(cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let r = cfg.lora_rank;
    let mut out = Vec::new();
    for w in FFN_WEIGHTS {
        let [d_out, d_in] = ffn_weight_shape(cfg, w);
        out.push((names::lora_a(prefix, w), vec![r, d_in]));
        out.push((names::lora_b(prefix, w), vec![d_out, r]));
    }
    out
}

/// Seeded initial value for a parameter, chosen by its name.
pub(crate) fn init_value(name: &str, shape: &[usize], cfg: &ModelConfig, rng: &RngState) -> Tensor {
    let n: usize = shape.iter().product();
    let depth_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
    let std = if name.ends_with("norm") {
        return Tensor::full(shape, 1.0);
    } else if name.ends_with(".lora_b") {
        return Tensor::zeros(shape);
    } else if name == names::EMBED || name == names::POS_EMBED {
        0.3
    } else if name.ends_with(".router") || name.ends_with(".routing_vector") {
        0.02
    } else if name.ends_with(".wo") || name.ends_with(".w2") {
        depth_scale / (shape[1] as f64).sqrt()
    } else {
        1.0 / (shape[shape.len() - 1] as f64).sqrt()
    };
    let mut g = rng.split(name).generator();
    let data = (0..n).map(|_| g.normal(std)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Binds store parameters into a graph once each.
pub(crate) struct Binder<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&Parameter) -> bool,
    cache: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub(crate) fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&Parameter) -> bool) -> Self {
        Binder {
            store,
            trainable,
            cache: HashMap::new(),
        }
    }

    pub(crate) fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.cache.get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name)?;
        let v = g.param(name, &p.value, (self.trainable)(p));
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }
}

/// Gate state of one mixture layer, kept for load balancing and analysis.
pub struct GateTrace {
    /// Router scores `[rows × n_experts]`.
    pub scores: Var,
    /// Row-major top-k membership, same shape as `scores`.
    pub mask: Vec<bool>,
    pub k: usize,
}

/// Handles produced by one forward pass.
pub struct Trace {
    pub logits: Var,
    /// Normalised FFN input of each layer (what a router sees).
    pub hidden: Vec<Var>,
    /// Per-layer gate state; empty for dense models.
    pub gates: Vec<GateTrace>,
    pub seq_len: usize,
    /// Flattened token ids, row-aligned with `logits`.
    pub tokens: Vec<usize>,
}

impl Trace {
    /// Next-token targets: the row indices with a successor and their targets.
    pub fn next_token_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (r, _) in self.tokens.iter().enumerate() {
            if (r + 1) % self.seq_len != 0 {
                rows.push(r);
                targets.push(self.tokens[r + 1]);
            }
        }
        (rows, targets)
    }
}

pub(crate) fn flatten_batch<S: AsRef<[usize]>>(
    cfg: &ModelConfig,
    batch: &[S],
) -> Result<(Vec<usize>, usize)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Empty("batch has no sequences".into()))?;
    let seq_len = first.as_ref().len();
    if seq_len == 0 {
        return Err(Error::Empty("empty token sequence".into()));
    }
    if seq_len > cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq_len} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut ids = Vec::with_capacity(batch.len() * seq_len);
    for seq in batch {
        let seq = seq.as_ref();
        if seq.len() != seq_len {
            return Err(Error::Shape("all sequences in a batch must share a length".into()));
        }
        for &t in seq {
            if t >= cfg.vocab_size {
                return Err(Error::OutOfRange {
                    index: t,
                    len: cfg.vocab_size,
                });
            }
        }
        ids.extend_from_slice(seq);
    }
    Ok((ids, seq_len))
}

/// `silu(h·W1ᵀ)·W2ᵀ`, each projection optionally augmented by a LoRA update
/// read from `adapter_prefix`.
pub(crate) fn ffn_apply(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    h: Var,
    base_prefix: &str,
    adapter_prefix: Option<&str>,
) -> Result<Var> {
    let project = |g: &mut Graph, b: &mut Binder, x: Var, w: &str| -> Result<Var> {
        let weight = b.var(g, &format!("{base_prefix}.{w}"))?;
        let mut y = g.matmul_t(x, weight)?;
        if let Some(ap) = adapter_prefix {
            let a = b.var(g, &names::lora_a(ap, w))?;
            let bb = b.var(g, &names::lora_b(ap, w))?;
            let low = g.matmul_t(x, a)?;
            let up = g.matmul_t(low, bb)?;
            let up = g.scale(up, cfg.lora_scaling);
            y = g.add(y, up)?;
        }
        Ok(y)
    };
    let up = project(g, b, h, "w1")?;
    let act = g.silu(up);
    project(g, b, act, "w2")
}

/// Output of the per-layer FFN hook: the FFN result and optional gate state.
pub(crate) type FfnOut = (Var, Option<GateTrace>);

/// Embedding → pre-norm blocks → final norm → LM head. The FFN of each block
/// is supplied by `ffn(graph, binder, layer, normed_hidden, rows)`.
pub(crate) fn forward_blocks<S, F>(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    batch: &[S],
    mut ffn: F,
) -> Result<Trace>
where
    S: AsRef<[usize]>,
    F: FnMut(&mut Graph, &mut Binder, usize, Var, usize) -> Result<FfnOut>,
{
    let (ids, seq_len) = flatten_batch(cfg, batch)?;
    let rows = ids.len();
    let positions: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();

    let embed = b.var(g, names::EMBED)?;
    let pos = b.var(g, names::POS_EMBED)?;
    let tok = g.embedding(embed, &ids)?;
    let pe = g.embedding(pos, &positions)?;
    let mut x = g.add(tok, pe)?;

    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut gates = Vec::new();
    for l in 0..cfg.n_layers {
        let gain = b.var(g, &names::attn_norm(l))?;
        let h = g.rms_norm(x, gain, RMS_EPS)?;
        let wq = b.var(g, &names::attn(l, "wq"))?;
        let wk = b.var(g, &names::attn(l, "wk"))?;
        let wv = b.var(g, &names::attn(l, "wv"))?;
        let wo = b.var(g, &names::attn(l, "wo"))?;
        let q = g.matmul_t(h, wq)?;
        let k = g.matmul_t(h, wk)?;
        let v = g.matmul_t(h, wv)?;
        let a = g.causal_attention(q, k, v, seq_len, cfg.n_heads)?;
        let o = g.matmul_t(a, wo)?;
        x = g.add(x, o)?;

        let gain = b.var(g, &names::ffn_norm(l))?;
        let h = g.rms_norm(x, gain, RMS_EPS)?;
        hidden.push(h);
        let (f, gate) = ffn(g, b, l, h, rows)?;
        if let Some(gate) = gate {
            gates.push(gate);
        }
        x = g.add(x, f)?;
    }
    let gain = b.var(g, names::FINAL_NORM)?;
    let xf = g.rms_norm(x, gain, RMS_EPS)?;
    let head = b.var(g, names::LM_HEAD)?;
    let logits = g.matmul_t(xf, head)?;
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite("forward logits".into()));
    }
    Ok(Trace {
        logits,
        hidden,
        gates,
        seq_len,
        tokens: ids,
    })
}

/// Checks that `store` holds exactly the expected names with the expected
/// shapes.
pub(crate) fn check_layout(store: &ParamStore, expected: &[(String, Vec<usize>)]) -> Result<()> {
    if store.len() != expected.len() {
        return Err(Error::Shape(format!(
            "expected {} parameters, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape) in expected {
        let p = store.get(name)?;
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "{name}: expected {shape:?}, found {:?}",
                p.value.shape()
            )));
        }
    }
    Ok(())
}
