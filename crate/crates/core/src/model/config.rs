use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy causal transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Rank of the FFN LoRA adapters; 0 disables them.
    pub lora_rank: usize,
    #[serde(default = "default_lora_scaling")]
    pub lora_scaling: f64,
}

fn default_lora_scaling() -> f64 {
    2.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_h: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq: 64,
            lora_rank: 4,
            lora_scaling: default_lora_scaling(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_h", self.d_h),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_h {} not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if !self.lora_scaling.is_finite() {
            return Err(Error::Config("lora_scaling must be finite".into()));
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.lora_rank > 0
    }

    /// Same architecture with LoRA adapters removed.
    pub fn without_lora(&self) -> Self {
        ModelConfig {
            lora_rank: 0,
            ..self.clone()
        }
    }
}

/// How gate weights are formed from router scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Softmax over the k selected scores only.
    #[default]
    TopKSoftmax,
    /// Softmax over all scores, then keep the top k without renormalising.
    SoftmaxThenTopK,
}

/// What an expert is inside a mixture layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertMode {
    /// Each expert owns a full FFN.
    #[default]
    Ffn,
    /// Experts share one frozen FFN and differ by LoRA adapters.
    Lora,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            n_layers: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
