use serde::{Deserialize, Serialize};

use super::losses::{lm_loss_graph, mean_load_balance_graph, LossBreakdown};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::{DenseModel, ExpertMode, MoeModel};
use crate::numerics::{Graph, ParamStore, Parameter, RngState, Role, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    /// Weight of the LM term in the pre-optimization objective.
    pub alpha: f64,
    pub load_balance_coeff: f64,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 2,
            batch_size: 4,
            checkpoint_interval: 50,
            alpha: 0.5,
            load_balance_coeff: 0.01,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.load_balance_coeff >= 0.0 && self.load_balance_coeff.is_finite()) {
            return bad(format!("load_balance_coeff must be >= 0, got {}", self.load_balance_coeff));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub(crate) fn optimizer(&self) -> Adam {
        Adam::new(self.learning_rate, (self.grad_clip > 0.0).then_some(self.grad_clip))
    }

    pub(crate) fn rng(&self) -> RngState {
        RngState::new(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub epoch: f64,
    pub loss: f64,
    pub tag: String,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Shuffled, equal-size batches for one epoch. The final partial batch is
/// dropped; a dataset smaller than `batch_size` yields one batch of
/// everything.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &RngState, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.split("shuffle").child(epoch as u64).generator().shuffle(&mut idx);
    let b = batch_size.min(n).max(1);
    idx.chunks_exact(b).map(|c| c.to_vec()).collect()
}

pub(crate) fn gather<'a, S: AsRef<[usize]>>(corpus: &'a [S], ids: &[usize]) -> Vec<&'a [usize]> {
    ids.iter().map(|&i| corpus[i].as_ref()).collect()
}

/// Backpropagates `loss`, stores the gradients and takes one optimizer step.
pub(crate) fn apply_step(
    params: &mut ParamStore,
    g: &Graph,
    loss: Var,
    opt: &mut Adam,
    trainable: &dyn Fn(&Parameter) -> bool,
) -> Result<()> {
    let grads = g.backward(loss)?;
    params.set_grads(&grads)?;
    opt.step(params, trainable)
}

fn dense_trainable(model: &DenseModel) -> impl Fn(&Parameter) -> bool {
    let lora = model.config().has_lora();
    move |p: &Parameter| !lora || p.role == Role::Expert
}

/// Full result of a dense run: harvested checkpoints and the per-step log.
#[derive(Clone, Debug)]
pub struct DenseRun {
    pub checkpoints: Vec<(DenseModel, CheckpointMeta)>,
    pub log: Vec<LossRecord>,
}

impl DenseRun {
    pub fn final_model(&self) -> Option<&DenseModel> {
        self.checkpoints.last().map(|(m, _)| m)
    }
}

/// Instruction-tunes a dense model with the LM loss alone, snapshotting it
/// every `checkpoint_interval` steps and at the end of the run. With LoRA
/// adapters present only the adapters train.
pub fn train_dense_with_checkpoints<S: AsRef<[usize]>>(
    model: DenseModel,
    corpus: &[S],
    cfg: &TrainConfig,
) -> Result<DenseRun> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    let mut model = model;
    let trainable = dense_trainable(&model);
    let mut opt = cfg.optimizer();
    let rng = cfg.rng();
    let mut log = Vec::new();
    let mut checkpoints: Vec<(DenseModel, CheckpointMeta)> = Vec::new();
    let per_epoch = epoch_batches(corpus.len(), cfg.batch_size, &rng, 0).len();
    let mut step = 0;
    let mut last = LossBreakdown::default();
    for epoch in 0..cfg.epochs {
        for ids in epoch_batches(corpus.len(), cfg.batch_size, &rng, epoch) {
            let batch = gather(corpus, &ids);
            let mut g = Graph::new();
            let trace = model.build(&mut g, &batch, &trainable)?;
            let loss = lm_loss_graph(&mut g, &trace)?;
            last = LossBreakdown::dense(g.scalar(loss));
            apply_step(model.params_mut(), &g, loss, &mut opt, &trainable)?;
            step += 1;
            let ep = step as f64 / per_epoch as f64;
            log.push(LossRecord { step, epoch: ep, loss: last });
            if step % cfg.checkpoint_interval == 0 {
                checkpoints.push((model.clone(), meta(step, ep, last.total)));
            }
        }
    }
    if checkpoints.last().map(|(_, m)| m.step) != Some(step) {
        let ep = if per_epoch == 0 { 0.0 } else { step as f64 / per_epoch as f64 };
        checkpoints.push((model, meta(step, ep, last.total)));
    }
    Ok(DenseRun { checkpoints, log })
}

fn meta(step: usize, epoch: f64, loss: f64) -> CheckpointMeta {
    CheckpointMeta {
        step,
        epoch,
        loss,
        tag: format!("step-{step}"),
    }
}

/// Parameters updated during MoE post-training: everything in FFN mode, only
/// experts and routers in LoRA mode.
pub fn moe_trainable(moe: &MoeModel) -> impl Fn(&Parameter) -> bool {
    let lora = moe.layout().mode == ExpertMode::Lora;
    move |p: &Parameter| !lora || p.role == Role::Expert
}

/// Fine-tunes an assembled MoE on `lm + load_balance_coeff · load_balance`,
/// where the balance term is averaged over layers.
pub fn posttrain_moe<S: AsRef<[usize]>>(
    moe: MoeModel,
    corpus: &[S],
    cfg: &TrainConfig,
) -> Result<(MoeModel, Vec<LossRecord>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    let mut moe = moe;
    let trainable = moe_trainable(&moe);
    let mut opt = cfg.optimizer();
    let rng = cfg.rng();
    let per_epoch = epoch_batches(corpus.len(), cfg.batch_size, &rng, 0).len();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for ids in epoch_batches(corpus.len(), cfg.batch_size, &rng, epoch) {
            let batch = gather(corpus, &ids);
            let mut g = Graph::new();
            let trace = moe.build(&mut g, &batch, &trainable)?;
            let lm = lm_loss_graph(&mut g, &trace)?;
            let lb = mean_load_balance_graph(&mut g, &trace.gates)?;
            let weighted = g.scale(lb, cfg.load_balance_coeff);
            let total = g.add(lm, weighted)?;
            let breakdown =
                LossBreakdown::posttrain(g.scalar(lm), g.scalar(lb), cfg.load_balance_coeff);
            apply_step(moe.params_mut(), &g, total, &mut opt, &trainable)?;
            step += 1;
            log.push(LossRecord {
                step,
                epoch: step as f64 / per_epoch as f64,
                loss: breakdown,
            });
        }
    }
    Ok((moe, log))
}
