//! Toy causal transformer, its mixture-of-experts variant, LoRA adapters and
//! perplexity.

mod config;
mod dense;
mod gate;
mod lora;
mod moe;
mod perplexity;
mod transformer;

pub use config::{ExpertMode, GateMode, ModelConfig};
pub use dense::DenseModel;
pub use gate::{top_k_gate, top_k_gate_with, top_k_indices, top_k_mask};
pub use lora::{lora_effective_delta, LoraAdapter};
pub use moe::{moe_layer_forward, Expert, FfnExpert, MoeLayout, MoeModel};
pub use perplexity::{perplexity, perplexity_from_logits, LanguageModel};
pub use transformer::{names, GateTrace, Trace, FFN_WEIGHTS};
