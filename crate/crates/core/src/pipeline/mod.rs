//! Checkpoint files, run configuration, stage orchestration and routing
//! analysis.

pub mod checkpoint;
mod config;
mod routing;
mod stages;

pub use config::{
    derive_seed, Baseline, CheckpointStrategy, ExpansionConfig, PipelineConfig, PrepareConfig,
    SelectionConfig, SelectionStrategy,
};
pub use routing::{analyze_routing, RoutingTable};
pub use stages::{
    paths, pick_checkpoints, read_report, read_routing, sha256_file, spread, EvalReport,
    ModelScore, OutDirLock, Pipeline, Stage, StageRecord, StageStatus,
};
