//! Losses, the optimizer, dense training with checkpoint harvesting and MoE
//! post-training.

mod loops;
mod losses;
mod optim;

pub use loops::{
    epoch_batches, moe_trainable, posttrain_moe, train_dense_with_checkpoints, CheckpointMeta,
    DenseRun, LossRecord, TrainConfig,
};
pub(crate) use loops::gather;
pub use losses::{
    aux_loss_graph, aux_router_loss, combined_graph, combined_preopt_loss, dispatch_fractions,
    lm_loss, lm_loss_graph, load_balance_graph, load_balance_loss, mean_load_balance_graph,
    LossBreakdown,
};
pub use optim::Adam;
