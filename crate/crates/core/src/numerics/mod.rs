//! Dense tensors, seeded randomness, loss primitives and reverse-mode
//! differentiation.

mod gradcheck;
mod graph;
pub mod ops;
mod param;
mod rng;
mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use graph::{Graph, Var};
pub use ops::{binary_ce_with_logit, categorical_ce_with_logits, sigmoid, softmax};
pub use param::{Gradients, ParamStore, Parameter, Role};
pub use rng::{Generator, RngState, RNG_ALGORITHM};
pub use tensor::Tensor;
