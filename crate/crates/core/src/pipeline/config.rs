use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::expansion::MergeConfig;
use crate::model::{ExpertMode, ModelConfig};
use crate::numerics::RngState;
use crate::training::TrainConfig;
use crate::upcycle::{BackboneMerge, UpcycleConfig};

/// Which harvested checkpoints become the initial experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointStrategy {
    FrontHalf,
    Uniform,
    BackHalf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Trains the randomly initialised model into the shared base before
    /// expert preparation; `epochs = 0` keeps the random init as base.
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    /// Number of checkpoints kept as experts.
    pub m: usize,
    pub strategy: CheckpointStrategy,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            pretrain: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            m: 4,
            strategy: CheckpointStrategy::BackHalf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub merge: MergeConfig,
    /// Target number of experts.
    pub n: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            merge: MergeConfig::default(),
            n: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Lowest-perplexity expert with room.
    Skilled,
    /// Uniform draw over buckets with room.
    Random,
    /// No buckets; router pre-optimization is skipped.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub fraction: f64,
    /// Bucket capacity; `None` means `ceil(|seed| / n)`.
    pub capacity: Option<usize>,
    pub strategy: SelectionStrategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            fraction: 0.01,
            capacity: None,
            strategy: SelectionStrategy::Skilled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub prepare: PrepareConfig,
    pub expansion: ExpansionConfig,
    pub selection: SelectionConfig,
    pub upcycle: UpcycleConfig,
    pub posttrain: TrainConfig,
    pub baseline: Baseline,
    /// Layer inspected by routing analysis; `None` means `n_layers / 2`.
    pub analysis_layer: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            model: ModelConfig::default().without_lora(),
            corpus: CorpusSpec::default(),
            prepare: PrepareConfig::default(),
            expansion: ExpansionConfig::default(),
            selection: SelectionConfig::default(),
            upcycle: UpcycleConfig::default(),
            posttrain: TrainConfig::default(),
            baseline: Baseline::Vanilla,
            analysis_layer: None,
            out_dir: None,
        }
    }
}

/// Seed of the named stage stream under `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    RngState::new(root).split(label).seed
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copies the root seed into every sub-configuration as a derived stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = derive_seed(seed, "corpus");
        self.prepare.pretrain.seed = derive_seed(seed, "pretrain");
        self.prepare.train.seed = derive_seed(seed, "prepare");
        self.expansion.merge.seed = derive_seed(seed, "expand");
        self.upcycle.preopt.seed = derive_seed(seed, "preopt");
        self.posttrain.seed = derive_seed(seed, "posttrain");
        self
    }

    pub fn model_seed(&self) -> RngState {
        RngState::new(derive_seed(self.seed, "model-init"))
    }

    pub fn stage_rng(&self, label: &str) -> RngState {
        RngState::new(derive_seed(self.seed, label))
    }

    pub fn analysis_layer(&self) -> usize {
        self.analysis_layer.unwrap_or(self.model.n_layers / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.corpus.validate()?;
        self.prepare.pretrain.validate()?;
        self.prepare.train.validate()?;
        self.expansion.merge.validate()?;
        self.posttrain.validate()?;
        self.upcycle.validate(&self.model)?;
        if self.corpus.vocab_size != self.model.vocab_size {
            return bad(format!(
                "corpus vocab {} differs from model vocab {}",
                self.corpus.vocab_size, self.model.vocab_size
            ));
        }
        if self.corpus.seq_len > self.model.max_seq {
            return bad(format!(
                "corpus seq_len {} exceeds max_seq {}",
                self.corpus.seq_len, self.model.max_seq
            ));
        }
        let (m, n) = (self.prepare.m, self.expansion.n);
        if m == 0 || n < m {
            return bad(format!("need n >= m >= 1, got m = {m}, n = {n}"));
        }
        if n > m && m < 2 {
            return bad("expansion needs at least 2 prepared experts".into());
        }
        if self.upcycle.n_experts != n {
            return bad(format!(
                "upcycle.n_experts = {} but expansion.n = {n}",
                self.upcycle.n_experts
            ));
        }
        if self.upcycle.mode == ExpertMode::Lora && self.upcycle.backbone_merge != BackboneMerge::FrozenBase {
            return bad("LoRA upcycling requires backbone_merge = frozen-base".into());
        }
        if !(self.selection.fraction > 0.0 && self.selection.fraction <= 1.0) {
            return bad(format!("selection fraction {} outside (0, 1]", self.selection.fraction));
        }
        if self.selection.capacity == Some(0) {
            return bad("selection capacity must be >= 1".into());
        }
        if self.analysis_layer() >= self.model.n_layers {
            return bad(format!("analysis layer {} out of range", self.analysis_layer()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = PipelineConfig::default().with_seed(5);
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.analysis_layer(), 1);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"seed": 3, "prepare": {"m": 2, "strategy": "uniform"}}"#).unwrap();
        assert_eq!(c.prepare.m, 2);
        assert_eq!(c.prepare.strategy, CheckpointStrategy::Uniform);
        assert_eq!(c.expansion.n, 8);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn validation_failures() {
        let base = PipelineConfig::default();
        let mut c = base.clone();
        c.expansion.n = 2;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.model.lora_rank = 4;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.corpus.vocab_size = 32;
        assert!(c.validate().is_err());
        let mut c = base;
        c.upcycle.n_experts = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_differ_by_stage() {
        let c = PipelineConfig::default().with_seed(1);
        assert_ne!(c.prepare.train.seed, c.posttrain.seed);
        assert_ne!(c.corpus.seed, PipelineConfig::default().with_seed(2).corpus.seed);
    }
}
