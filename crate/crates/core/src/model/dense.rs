use super::config::ModelConfig;
use super::lora::LoraAdapter;
use super::perplexity::LanguageModel;
use super::transformer::{
    backbone_shapes, check_layout, ffn_apply, ffn_shapes, forward_blocks, init_value, lora_shapes,
    names, Binder, Trace,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Parameter, Role, RngState, Tensor};

/// Dense causal transformer. Parameters are partitioned into backbone
/// (embeddings, attention, norms, LM head) and expert layers (the FFN, or its
/// LoRA adapters when `lora_rank > 0`, in which case the FFN itself is frozen
/// backbone).
#[derive(Clone, Debug)]
pub struct DenseModel {
    config: ModelConfig,
    params: ParamStore,
}

impl DenseModel {
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = backbone_shapes(config);
        for l in 0..config.n_layers {
            out.extend(ffn_shapes(config, &names::ffn(l)));
            if config.has_lora() {
                out.extend(lora_shapes(config, &names::ffn(l)));
            }
        }
        out
    }

    pub fn role_of(config: &ModelConfig, name: &str) -> Role {
        let is_ffn = (0..config.n_layers).any(|l| name.starts_with(&format!("{}.", names::ffn(l))));
        match (is_ffn, name.contains(".lora_"), config.has_lora()) {
            (true, true, _) => Role::Expert,
            (true, false, false) => Role::Expert,
            _ => Role::Backbone,
        }
    }

    pub fn new(config: ModelConfig, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in Self::layout(&config) {
            let v = init_value(&name, &shape, &config, rng);
            let role = Self::role_of(&config, &name);
            params.insert(name, v, role)?;
        }
        Ok(DenseModel { config, params })
    }

    /// Rebuilds a model from named tensors, which must match the layout
    /// exactly.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, v) in tensors {
            let role = Self::role_of(&config, &name);
            params.insert(name, v, role)?;
        }
        check_layout(&params, &Self::layout(&config))?;
        Ok(DenseModel { config, params })
    }

    /// Copies this LoRA-free model into `config`, adding freshly initialised
    /// adapters (`B = 0`), so the result computes the same function.
    pub fn with_adapters(&self, config: ModelConfig, rng: &RngState) -> Result<Self> {
        if self.config.has_lora() || self.config != config.without_lora() {
            return Err(Error::Config("with_adapters needs a LoRA-free model of the same shape".into()));
        }
        let mut out = DenseModel::new(config, rng)?;
        for p in self.params.iter() {
            out.params.set_value(&p.name, p.value.clone())?;
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Names of the expert-layer parameters in sorted order.
    pub fn expert_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.role == Role::Expert)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn lora_adapter(&self, layer: usize, weight: &str) -> Result<LoraAdapter> {
        if !self.config.has_lora() {
            return Err(Error::InvalidArgument("model has no LoRA adapters".into()));
        }
        let prefix = names::ffn(layer);
        Ok(LoraAdapter {
            a: self.params.value(&names::lora_a(&prefix, weight))?.clone(),
            b: self.params.value(&names::lora_b(&prefix, weight))?.clone(),
            scaling: self.config.lora_scaling,
        })
    }

    /// Records a forward pass over equal-length sequences.
    pub fn build<S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        batch: &[S],
        trainable: &dyn Fn(&Parameter) -> bool,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let mut binder = Binder::new(&self.params, trainable);
        forward_blocks(g, &mut binder, cfg, batch, |g, b, l, h, _rows| {
            let prefix = names::ffn(l);
            let adapters = cfg.has_lora().then_some(prefix.as_str());
            Ok((ffn_apply(g, b, cfg, h, &prefix, adapters)?, None))
        })
    }

    /// Logits `[batch·seq_len × vocab]` for a batch of equal-length sequences.
    pub fn forward_batch<S: AsRef<[usize]>>(&self, batch: &[S]) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.build(&mut g, batch, &|_| false)?;
        Ok(g.value(t.logits).clone())
    }

    /// Rounds every parameter to `f32` precision, as saving and reloading would.
    pub fn narrow_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            p.value = p.value.narrow_to_f32();
        }
    }
}

impl LanguageModel for DenseModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_batch(&[tokens])
    }
}
