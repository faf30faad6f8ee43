//! Minimal neural-network toolkit on top of `candle-core`.

mod layers;
mod optim;
mod store;

pub use layers::{
    attention, bce_with_logits, cross_entropy, log_softmax_last, mask_bias, mean_pool, normalize_last,
    softmax_last, timestep_embedding, Activation, Block, LayerNorm, Linear, Mlp, SelfAttention,
};
pub use optim::{AdamW, AdamWConfig};
pub use store::{hash_tensors, Init, Scope, VarStore};

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Scalar value of a rank-0 tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Scalar loss value, failing if it is not finite.
pub fn finite_scalar(t: &Tensor, stage: &str, batch: usize) -> Result<f64> {
    let v = scalar(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training {
            stage: stage.to_string(),
            batch,
            msg: format!("loss is {v}"),
        })
    }
}
