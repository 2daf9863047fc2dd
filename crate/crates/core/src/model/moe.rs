use serde::{Deserialize, Serialize};

use super::config::{ExpertMode, GateMode, ModelConfig};
use super::gate::{top_k_gate_with, top_k_mask};
use super::lora::{lora_effective_delta, LoraAdapter};
use super::perplexity::LanguageModel;
use super::transformer::{
    backbone_shapes, check_layout, ffn_apply, ffn_shapes, forward_blocks, lora_shapes, names,
    Binder, GateTrace, Trace,
};
use crate::error::{Error, Result};
use crate::numerics::{ops::sigmoid, Graph, ParamStore, Parameter, Role, Tensor};

/// Mixture structure shared by every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeLayout {
    pub n_experts: usize,
    pub k: usize,
    pub mode: ExpertMode,
    #[serde(default)]
    pub gate_mode: GateMode,
}

impl MoeLayout {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.n_experts == 0 || self.k == 0 || self.k > self.n_experts {
            return Err(Error::Config(format!(
                "need 1 <= k <= n_experts, got k = {}, n = {}",
                self.k, self.n_experts
            )));
        }
        match self.mode {
            ExpertMode::Lora if !config.has_lora() => {
                Err(Error::Config("LoRA experts need lora_rank >= 1".into()))
            }
            ExpertMode::Ffn if config.has_lora() => {
                Err(Error::Config("FFN experts need lora_rank = 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Transformer whose every FFN is a top-k routed mixture of experts.
///
/// FFN mode names experts `layer.{l}.expert.{i}.w1|w2`. LoRA mode keeps the
/// shared frozen FFN at `layer.{l}.ffn.*` and stores adapters at
/// `layer.{l}.expert.{i}.w*.lora_a|lora_b`. Routers are `layer.{l}.router`
/// with shape `[d_h × n_experts]`.
#[derive(Clone, Debug)]
pub struct MoeModel {
    config: ModelConfig,
    layout: MoeLayout,
    params: ParamStore,
}

impl MoeModel {
    pub fn param_layout(config: &ModelConfig, layout: &MoeLayout) -> Vec<(String, Vec<usize>)> {
        let mut out = backbone_shapes(config);
        for l in 0..config.n_layers {
            out.push((names::router(l), vec![config.d_h, layout.n_experts]));
            if layout.mode == ExpertMode::Lora {
                out.extend(ffn_shapes(config, &names::ffn(l)));
            }
            for i in 0..layout.n_experts {
                let prefix = names::expert(l, i);
                match layout.mode {
                    ExpertMode::Ffn => out.extend(ffn_shapes(config, &prefix)),
                    ExpertMode::Lora => out.extend(lora_shapes(config, &prefix)),
                }
            }
        }
        out
    }

    /// Experts and routers are [`Role::Expert`]; everything else is backbone.
    pub fn role_of(name: &str) -> Role {
        if name.contains(".expert.") || name.ends_with(".router") {
            Role::Expert
        } else {
            Role::Backbone
        }
    }

    pub fn from_tensors(
        config: ModelConfig,
        layout: MoeLayout,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        layout.validate(&config)?;
        let mut params = ParamStore::new();
        for (name, v) in tensors {
            let role = Self::role_of(&name);
            params.insert(name, v, role)?;
        }
        check_layout(&params, &Self::param_layout(&config, &layout))?;
        Ok(MoeModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &MoeLayout {
        &self.layout
    }

    pub fn n_experts(&self) -> usize {
        self.layout.n_experts
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn router(&self, layer: usize) -> Result<&Tensor> {
        self.params.value(&names::router(layer))
    }

    pub fn narrow_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            p.value = p.value.narrow_to_f32();
        }
    }

    /// Standalone expert `i` of layer `l`.
    pub fn expert(&self, layer: usize, i: usize) -> Result<FfnExpert> {
        let load = |n: &str| self.params.value(n).cloned();
        let prefix = names::expert(layer, i);
        match self.layout.mode {
            ExpertMode::Ffn => Ok(FfnExpert {
                w1: load(&format!("{prefix}.w1"))?,
                w2: load(&format!("{prefix}.w2"))?,
                lora: None,
            }),
            ExpertMode::Lora => {
                let base = names::ffn(layer);
                let adapter = |w: &str| -> Result<LoraAdapter> {
                    Ok(LoraAdapter {
                        a: load(&names::lora_a(&prefix, w))?,
                        b: load(&names::lora_b(&prefix, w))?,
                        scaling: self.config.lora_scaling,
                    })
                };
                Ok(FfnExpert {
                    w1: load(&format!("{base}.w1"))?,
                    w2: load(&format!("{base}.w2"))?,
                    lora: Some([adapter("w1")?, adapter("w2")?]),
                })
            }
        }
    }

    pub fn build<S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        batch: &[S],
        trainable: &dyn Fn(&Parameter) -> bool,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let layout = self.layout;
        let mut binder = Binder::new(&self.params, trainable);
        forward_blocks(g, &mut binder, cfg, batch, |g, b, l, h, rows| {
            let router = b.var(g, &names::router(l))?;
            let scores = g.matmul(h, router)?;
            let mask = top_k_mask(g.value(scores), layout.k)?;
            let gates = match layout.gate_mode {
                GateMode::TopKSoftmax => g.masked_softmax(scores, &mask)?,
                GateMode::SoftmaxThenTopK => {
                    let probs = g.row_softmax(scores)?;
                    let keep = Tensor::from_parts(
                        vec![rows, layout.n_experts],
                        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                    );
                    let keep = g.input(keep);
                    g.mul(probs, keep)?
                }
            };
            let mut out: Option<_> = None;
            for i in 0..layout.n_experts {
                let sel: Vec<usize> = (0..rows)
                    .filter(|&r| mask[r * layout.n_experts + i])
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let hi = g.gather_rows(h, &sel)?;
                let prefix = names::expert(l, i);
                let ei = match layout.mode {
                    ExpertMode::Ffn => ffn_apply(g, b, cfg, hi, &prefix, None)?,
                    ExpertMode::Lora => ffn_apply(g, b, cfg, hi, &names::ffn(l), Some(&prefix))?,
                };
                let wi = g.scale_rows_by(ei, gates, &sel, i)?;
                let si = g.scatter_rows(wi, &sel, rows)?;
                out = Some(match out {
                    None => si,
                    Some(acc) => g.add(acc, si)?,
                });
            }
            // every row selects k >= 1 experts, so at least one expert ran
            let out = out.ok_or_else(|| Error::Empty("mixture layer routed no tokens".into()))?;
            Ok((
                out,
                Some(GateTrace {
                    scores,
                    mask,
                    k: layout.k,
                }),
            ))
        })
    }

    pub fn forward_batch<S: AsRef<[usize]>>(&self, batch: &[S]) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.build(&mut g, batch, &|_| false)?;
        Ok(g.value(t.logits).clone())
    }
}

impl LanguageModel for MoeModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_batch(&[tokens])
    }
}

/// A single expert evaluated outside the graph.
pub trait Expert {
    fn apply(&self, h: &Tensor) -> Result<Tensor>;
}

/// `silu(h·W1ᵀ)·W2ᵀ` with optional LoRA updates on both projections.
#[derive(Clone, Debug)]
pub struct FfnExpert {
    pub w1: Tensor,
    pub w2: Tensor,
    pub lora: Option<[LoraAdapter; 2]>,
}

impl Expert for FfnExpert {
    fn apply(&self, h: &Tensor) -> Result<Tensor> {
        let row = h.clone().reshape(&[1, h.numel()])?;
        let (w1, w2) = match &self.lora {
            None => (self.w1.clone(), self.w2.clone()),
            Some([a1, a2]) => (
                self.w1.add(&lora_effective_delta(a1)?)?,
                self.w2.add(&lora_effective_delta(a2)?)?,
            ),
        };
        let up = row.matmul_t(&w1)?.map(|x| x * sigmoid(x));
        let out = up.matmul_t(&w2)?;
        out.reshape(&[h.numel()])
    }
}

/// `Σ_{i ∈ TopK} w_i · E_i(h)` with scores `routerᵀh`.
pub fn moe_layer_forward<E: Expert>(
    h: &Tensor,
    router: &Tensor,
    experts: &[E],
    k: usize,
    gate_mode: GateMode,
) -> Result<Tensor> {
    if router.shape().len() != 2 || router.rows() != h.numel() || router.cols() != experts.len() {
        return Err(Error::Shape(format!(
            "router {:?} for hidden {:?} and {} experts",
            router.shape(),
            h.shape(),
            experts.len()
        )));
    }
    let row = h.clone().reshape(&[1, h.numel()])?;
    let scores = row.matmul(router)?;
    let (idx, w) = top_k_gate_with(scores.data(), k, gate_mode)?;
    let mut out = Tensor::zeros(h.shape());
    for (&i, &wi) in idx.iter().zip(&w) {
        let e = experts[i].apply(h)?;
        if e.shape() != h.shape() {
            return Err(Error::Shape(format!("expert {i} output {:?}", e.shape())));
        }
        out.axpy(wi, &e)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(Tensor);

    impl Expert for Linear {
        fn apply(&self, h: &Tensor) -> Result<Tensor> {
            let row = h.clone().reshape(&[1, h.numel()])?;
            row.matmul_t(&self.0)?.reshape(&[h.numel()])
        }
    }

    #[test]
    fn hand_instance_matches_brute_force() {
        let h = Tensor::vector(vec![1.0, -0.5]).unwrap();
        let router = Tensor::matrix(2, 3, vec![0.2, 1.0, -0.3, 0.4, 0.1, 0.6]).unwrap();
        let experts = [
            Linear(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            Linear(Tensor::matrix(2, 2, vec![0.0, 2.0, 1.0, 0.0]).unwrap()),
            Linear(Tensor::matrix(2, 2, vec![-1.0, 1.0, 3.0, 0.5]).unwrap()),
        ];
        let out = moe_layer_forward(&h, &router, &experts, 2, GateMode::TopKSoftmax).unwrap();

        // scores s_i = Σ_d h_d R[d, i]; brute force over all 2-subsets.
        let s: Vec<f64> = (0..3)
            .map(|i| h.data()[0] * router.at(0, i) + h.data()[1] * router.at(1, i))
            .collect();
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let best = pairs
            .iter()
            .max_by(|a, b| (s[a.0] + s[a.1]).total_cmp(&(s[b.0] + s[b.1])))
            .unwrap();
        let (ea, eb) = (s[best.0].exp(), s[best.1].exp());
        let (wa, wb) = (ea / (ea + eb), eb / (ea + eb));
        let oa = experts[best.0].apply(&h).unwrap();
        let ob = experts[best.1].apply(&h).unwrap();
        for c in 0..2 {
            let want = wa * oa.data()[c] + wb * ob.data()[c];
            assert!((out.data()[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_experts_reduce_to_one() {
        let e = Linear(Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let h = Tensor::vector(vec![0.9, 0.1]).unwrap();
        let want = e.apply(&h).unwrap();
        let experts = vec![
            Linear(e.0.clone()),
            Linear(e.0.clone()),
            Linear(e.0.clone()),
            Linear(e.0.clone()),
        ];
        let router = Tensor::matrix(2, 4, vec![0.5, -0.1, 0.9, 0.0, 1.1, 0.2, -0.4, 0.3]).unwrap();
        for k in 1..=4 {
            let got = moe_layer_forward(&h, &router, &experts, k, GateMode::TopKSoftmax).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
        }
    }

    #[test]
    fn single_expert_equals_ffn() {
        let e = FfnExpert {
            w1: Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap(),
            w2: Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap(),
            lora: None,
        };
        let h = Tensor::vector(vec![0.3, -0.8]).unwrap();
        let router = Tensor::matrix(2, 1, vec![0.7, 0.2]).unwrap();
        let got = moe_layer_forward(&h, &router, std::slice::from_ref(&e), 1, GateMode::TopKSoftmax).unwrap();
        assert_eq!(got, e.apply(&h).unwrap());
    }

    #[test]
    fn shape_mismatch_errors() {
        let e = Linear(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let h = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let router = Tensor::matrix(3, 1, vec![0.0; 3]).unwrap();
        assert!(moe_layer_forward(&h, &router, &[e], 1, GateMode::TopKSoftmax).is_err());
    }

    #[test]
    fn layout_rejects_mode_mismatch() {
        let cfg = ModelConfig::default();
        let l = MoeLayout {
            n_experts: 4,
            k: 2,
            mode: ExpertMode::Ffn,
            gate_mode: GateMode::TopKSoftmax,
        };
        assert!(l.validate(&cfg).is_err());
        assert!(l.validate(&cfg.without_lora()).is_ok());
        let bad_k = MoeLayout { k: 5, ..l };
        assert!(bad_k.validate(&cfg.without_lora()).is_err());
    }
}
