//! Dense tensors, tape-based reverse-mode differentiation and Adam.

mod adam;
mod attention;
mod exact_sum;
mod gemm;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use adam::{AdamConfig, AdamState};
pub use attention::{multi_head_attention, AttentionParams};
pub use exact_sum::{exact_sum, ExactSum};
pub use params::{glorot_uniform, normal_table, Bound, ParamStore};
pub use tape::{sigmoid, AttentionShape, Tape, Var, PAD_LOGIT};
pub use tensor::Tensor;

/// Default LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
