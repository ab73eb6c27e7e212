//! Gradient reversal as standalone tensor maps.
//!
//! Inside a graph use [`Tape::grl`](super::Tape::grl); these functions expose
//! the same forward and backward rules directly on tensors.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlConfig {
    pub lambda: f64,
}

impl GrlConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!(
                "GRL lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(GrlConfig { lambda })
    }
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig { lambda: 1.0 }
    }
}

/// Identity: returns a bitwise copy of `x`.
pub fn grl_forward(x: &Tensor, _cfg: &GrlConfig) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().to_vec()).expect("shape preserved")
}

/// `-lambda * upstream`, elementwise.
pub fn grl_backward(upstream: &Tensor, cfg: &GrlConfig) -> Tensor {
    let s = -cfg.lambda;
    let data = upstream.data().iter().map(|g| s * g).collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("shape preserved")
}
