//! Network blocks: convolutional feature extractor with multi-head
//! self-attention, decoder, location estimator and domain classifier.
//!
//! Dense weights are stored `[in, out]` and applied as `y = x W + b`.

mod attention;
mod blocks;
mod config;
mod init;

pub use attention::self_attention;
pub use blocks::{classifier_forward, decoder_forward, estimator_forward, extractor_forward};
pub use config::{Architecture, ConvLayer, EstimatorConfig, ExtractorConfig, SaConfig};
pub use init::{init_all, init_decoder, init_extractor, init_head, Role};
