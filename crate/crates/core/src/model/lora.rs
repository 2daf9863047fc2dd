use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Low-rank update `B·A·scaling` for a `[d_out × d_in]` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

pub fn lora_effective_delta(adapter: &LoraAdapter) -> Result<Tensor> {
    if adapter.a.shape().len() != 2 || adapter.b.shape().len() != 2 {
        return Err(Error::Shape("LoRA factors must be matrices".into()));
    }
    if adapter.b.cols() != adapter.a.rows() {
        return Err(Error::Shape(format!(
            "LoRA B {:?} incompatible with A {:?}",
            adapter.b.shape(),
            adapter.a.shape()
        )));
    }
    Ok(adapter.b.matmul(&adapter.a)?.scale(adapter.scaling))
}
