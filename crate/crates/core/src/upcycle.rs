//! Router pre-optimization, router and backbone assembly, and conversion of
//! an expert set (or a single dense checkpoint) into a mixture model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpertSet;
use crate::model::{
    lora_effective_delta, names, DenseModel, ExpertMode, GateMode, ModelConfig, MoeLayout,
    MoeModel, FFN_WEIGHTS,
};
use crate::numerics::{Graph, ParamStore, Parameter, RngState, Role, Tensor, Var};
use crate::training::{
    aux_loss_graph, combined_graph, epoch_batches, gather, lm_loss_graph, LossBreakdown,
    LossRecord, TrainConfig,
};

/// Backbone of the assembled model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMerge {
    UniformAverage,
    FrozenBase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpcycleConfig {
    pub mode: ExpertMode,
    pub n_experts: usize,
    pub k: usize,
    pub gate_mode: GateMode,
    pub preopt: TrainConfig,
    pub backbone_merge: BackboneMerge,
}

impl Default for UpcycleConfig {
    fn default() -> Self {
        UpcycleConfig {
            mode: ExpertMode::Ffn,
            n_experts: 8,
            k: 2,
            gate_mode: GateMode::TopKSoftmax,
            preopt: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            backbone_merge: BackboneMerge::UniformAverage,
        }
    }
}

impl UpcycleConfig {
    pub fn layout(&self) -> MoeLayout {
        MoeLayout {
            n_experts: self.n_experts,
            k: self.k,
            mode: self.mode,
            gate_mode: self.gate_mode,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.layout().validate(model)?;
        self.preopt.validate()?;
        if self.mode == ExpertMode::Lora && self.backbone_merge != BackboneMerge::FrozenBase {
            return Err(Error::Config("LoRA upcycling requires backbone_merge = frozen-base".into()));
        }
        Ok(())
    }
}

/// One freshly initialised routing vector per layer, `N(0, 0.02²)`.
pub fn init_routing_vectors(cfg: &ModelConfig, rng: &RngState) -> Vec<Tensor> {
    (0..cfg.n_layers)
        .map(|l| {
            let mut g = rng.split(&names::routing_vector(l)).generator();
            let data = (0..cfg.d_h).map(|_| g.normal(0.02)).collect();
            Tensor::from_parts(vec![cfg.d_h], data)
        })
        .collect()
}

fn vector_store(vectors: &[Tensor]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (l, v) in vectors.iter().enumerate() {
        s.insert(names::routing_vector(l), v.clone(), Role::Expert)?;
    }
    Ok(s)
}

fn check_vectors(cfg: &ModelConfig, vectors: &[Tensor]) -> Result<()> {
    if vectors.len() != cfg.n_layers || vectors.iter().any(|v| v.shape() != [cfg.d_h]) {
        return Err(Error::Shape(format!(
            "need {} routing vectors of width {}",
            cfg.n_layers, cfg.d_h
        )));
    }
    Ok(())
}

/// Records the pre-optimization objective for one batch.
pub fn preopt_graph(
    g: &mut Graph,
    expert: &DenseModel,
    vectors: &ParamStore,
    batch: &[&[usize]],
    alpha: f64,
    trainable: &dyn Fn(&Parameter) -> bool,
) -> Result<(Var, LossBreakdown)> {
    let trace = expert.build(g, batch, trainable)?;
    let vars = (0..expert.config().n_layers)
        .map(|l| {
            let p = vectors.get(&names::routing_vector(l))?;
            Ok(g.param(&p.name, &p.value, trainable(p)))
        })
        .collect::<Result<Vec<Var>>>()?;
    let lm = lm_loss_graph(g, &trace)?;
    let aux = aux_loss_graph(g, &trace.hidden, &vars)?;
    let total = combined_graph(g, lm, aux, alpha)?;
    Ok((total, LossBreakdown::preopt(g.scalar(lm), g.scalar(aux), alpha)))
}

#[derive(Clone, Debug)]
pub struct Preoptimized {
    pub expert: DenseModel,
    pub vectors: Vec<Tensor>,
    pub log: Vec<LossRecord>,
}

/// Trains the expert layers of `expert` together with its routing vectors on
/// the expert's own bucket, using `alpha · lm + (1 − alpha) · aux`. The
/// backbone is never written. An empty bucket leaves everything unchanged.
pub fn preoptimize_expert<S: AsRef<[usize]>>(
    expert: DenseModel,
    vectors: Vec<Tensor>,
    bucket: &[S],
    cfg: &TrainConfig,
) -> Result<Preoptimized> {
    cfg.validate()?;
    check_vectors(expert.config(), &vectors)?;
    if bucket.is_empty() {
        log::warn!("empty bucket; routing vectors keep their initial values");
        return Ok(Preoptimized {
            expert,
            vectors,
            log: Vec::new(),
        });
    }
    let mut expert = expert;
    let mut store = vector_store(&vectors)?;
    let trainable = |p: &Parameter| p.role == Role::Expert;
    let mut opt = cfg.optimizer();
    let rng = cfg.rng();
    let per_epoch = epoch_batches(bucket.len(), cfg.batch_size, &rng, 0).len();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for ids in epoch_batches(bucket.len(), cfg.batch_size, &rng, epoch) {
            let batch = gather(bucket, &ids);
            let mut g = Graph::new();
            let (total, loss) = preopt_graph(&mut g, &expert, &store, &batch, cfg.alpha, &trainable)?;
            let grads = g.backward(total)?;
            expert.params_mut().set_grads(&grads)?;
            store.set_grads(&grads)?;
            opt.step_all(&mut [expert.params_mut(), &mut store], &trainable)?;
            step += 1;
            log.push(LossRecord {
                step,
                epoch: step as f64 / per_epoch as f64,
                loss,
            });
        }
    }
    let vectors = (0..vectors.len())
        .map(|l| store.value(&names::routing_vector(l)).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(Preoptimized {
        expert,
        vectors,
        log,
    })
}

/// Mean router logit `r_l · h_l` per layer over every token of `samples`.
pub fn mean_router_logits<S: AsRef<[usize]>>(
    expert: &DenseModel,
    vectors: &[Tensor],
    samples: &[S],
) -> Result<Vec<f64>> {
    check_vectors(expert.config(), vectors)?;
    let mut g = Graph::new();
    let trace = expert.build(&mut g, samples, &|_| false)?;
    trace
        .hidden
        .iter()
        .zip(vectors)
        .map(|(&h, r)| {
            let col = r.clone().reshape(&[r.numel(), 1])?;
            let logits = g.value(h).matmul(&col)?;
            Ok(logits.sum() / logits.numel() as f64)
        })
        .collect()
}

/// Per-layer routers `[d_h × n]` whose column `i` is expert `i`'s vector,
/// from `vectors[expert][layer]`.
pub fn assemble_router(vectors: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let n = vectors.len();
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("no routing vectors".into()))?;
    let layers = first.len();
    let d = first.first().map_or(0, Tensor::numel);
    if layers == 0 || d == 0 {
        return Err(Error::Empty("routing vectors have no layers".into()));
    }
    (0..layers)
        .map(|l| {
            let mut data = vec![0.0; d * n];
            for (i, per_layer) in vectors.iter().enumerate() {
                let v = per_layer.get(l).ok_or_else(|| {
                    Error::InvalidArgument(format!("expert {i} has no routing vector for layer {l}"))
                })?;
                if v.numel() != d || v.shape().len() != 1 {
                    return Err(Error::Shape(format!(
                        "routing vector ({i}, {l}) has shape {:?}, expected [{d}]",
                        v.shape()
                    )));
                }
                for (r, &x) in v.data().iter().enumerate() {
                    data[r * n + i] = x;
                }
            }
            Tensor::new(vec![d, n], data)
        })
        .collect()
}

/// `Σ w_i · backbone_i`, evaluated around the heaviest expert so identical
/// inputs and one-hot weights reproduce their source exactly.
pub fn average_backbone(experts: &[DenseModel], weights: &[f64]) -> Result<Vec<(String, Tensor)>> {
    if experts.is_empty() || experts.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} experts with {} weights",
            experts.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("backbone weights sum to {sum}, not 1")));
    }
    let pivot = (0..weights.len())
        .fold(0, |best, i| if weights[i] > weights[best] { i } else { best });
    let mut out = Vec::new();
    for p in experts[pivot].params().iter().filter(|p| p.role == Role::Backbone) {
        let mut acc = p.value.clone();
        for (i, e) in experts.iter().enumerate() {
            let other = e.params().value(&p.name)?;
            if other.shape() != p.value.shape() {
                return Err(Error::Shape(format!("backbone {} of expert {i}", p.name)));
            }
            if i == pivot || weights[i] == 0.0 {
                continue;
            }
            let w = weights[i];
            for ((a, &x), &base) in acc.data_mut().iter_mut().zip(other.data()).zip(p.value.data()) {
                *a += w * (x - base);
            }
        }
        out.push((p.name.clone(), acc));
    }
    Ok(out)
}

fn expert_tensors(
    expert: &DenseModel,
    i: usize,
    mode: ExpertMode,
) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for l in 0..expert.config().n_layers {
        let src = names::ffn(l);
        let dst = names::expert(l, i);
        for w in FFN_WEIGHTS {
            match mode {
                ExpertMode::Ffn => out.push((
                    format!("{dst}.{w}"),
                    expert.params().value(&format!("{src}.{w}"))?.clone(),
                )),
                ExpertMode::Lora => {
                    out.push((
                        names::lora_a(&dst, w),
                        expert.params().value(&names::lora_a(&src, w))?.clone(),
                    ));
                    out.push((
                        names::lora_b(&dst, w),
                        expert.params().value(&names::lora_b(&src, w))?.clone(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Installs the experts and per-layer routers into one mixture model.
pub fn assemble_moe(set: &ExpertSet, routers: &[Tensor], cfg: &UpcycleConfig) -> Result<MoeModel> {
    let config = set.base().config().clone();
    cfg.validate(&config)?;
    if set.len() != cfg.n_experts {
        return Err(Error::Config(format!(
            "{} experts for n_experts = {}",
            set.len(),
            cfg.n_experts
        )));
    }
    if routers.len() != config.n_layers {
        return Err(Error::Shape(format!("{} routers for {} layers", routers.len(), config.n_layers)));
    }
    let mut tensors = match cfg.backbone_merge {
        BackboneMerge::UniformAverage => {
            let w = vec![1.0 / set.len() as f64; set.len()];
            average_backbone(set.experts(), &w)?
        }
        BackboneMerge::FrozenBase => set
            .base()
            .params()
            .iter()
            .filter(|p| p.role == Role::Backbone)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect(),
    };
    for (l, r) in routers.iter().enumerate() {
        tensors.push((names::router(l), r.clone()));
    }
    for (i, e) in set.experts().iter().enumerate() {
        tensors.extend(expert_tensors(e, i, cfg.mode)?);
    }
    MoeModel::from_tensors(config, cfg.layout(), tensors)
}

/// Replicates the checkpoint's FFN into `n` identical experts behind a
/// random `N(0, 0.02²)` router. With LoRA adapters, the checkpoint's
/// adapters are folded into the shared FFN and every expert starts from a
/// fresh adapter with `B = 0`.
pub fn vanilla_upcycle(
    final_ckpt: &DenseModel,
    n: usize,
    k: usize,
    gate_mode: GateMode,
    rng: &RngState,
) -> Result<MoeModel> {
    let config = final_ckpt.config().clone();
    let mode = if config.has_lora() { ExpertMode::Lora } else { ExpertMode::Ffn };
    let layout = MoeLayout {
        n_experts: n,
        k,
        mode,
        gate_mode,
    };
    layout.validate(&config)?;
    let mut tensors = Vec::new();
    for p in final_ckpt.params().iter().filter(|p| p.role == Role::Backbone) {
        let mut v = p.value.clone();
        if mode == ExpertMode::Lora {
            let folded = (0..config.n_layers).flat_map(|l| FFN_WEIGHTS.map(|w| (l, w)));
            for (l, w) in folded {
                if p.name == format!("{}.{w}", names::ffn(l)) {
                    v = v.add(&lora_effective_delta(&final_ckpt.lora_adapter(l, w)?)?)?;
                }
            }
        }
        tensors.push((p.name.clone(), v));
    }
    for l in 0..config.n_layers {
        let mut g = rng.split(&names::router(l)).generator();
        let data = (0..config.d_h * n).map(|_| g.normal(0.02)).collect();
        tensors.push((names::router(l), Tensor::new(vec![config.d_h, n], data)?));
        for i in 0..n {
            let dst = names::expert(l, i);
            for w in FFN_WEIGHTS {
                match mode {
                    ExpertMode::Ffn => {
                        let src = format!("{}.{w}", names::ffn(l));
                        tensors.push((format!("{dst}.{w}"), final_ckpt.params().value(&src)?.clone()));
                    }
                    ExpertMode::Lora => {
                        let src = final_ckpt.params().value(&names::lora_a(&names::ffn(l), w))?;
                        let name_a = names::lora_a(&dst, w);
                        let mut g = rng.split(&name_a).generator();
                        let std = 1.0 / (src.cols() as f64).sqrt();
                        let a = (0..src.numel()).map(|_| g.normal(std)).collect();
                        tensors.push((name_a, Tensor::new(src.shape().to_vec(), a)?));
                        let b_shape = final_ckpt
                            .params()
                            .value(&names::lora_b(&names::ffn(l), w))?
                            .shape()
                            .to_vec();
                        tensors.push((names::lora_b(&dst, w), Tensor::zeros(&b_shape)));
                    }
                }
            }
        }
    }
    MoeModel::from_tensors(config, layout, tensors)
}
