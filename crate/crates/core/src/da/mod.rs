//! Datasets, training objectives and the training loop.
//!
//! Source data is labeled; target training data is an [`UnlabeledDataset`],
//! which has no location field at all. Every method sees targets only
//! through that type.

mod dataset;
mod model;
mod objective;
mod train;

pub use dataset::{
    build_datasets, fingerprint_at, generate_labeled, real_inputs, AreaMap, LabeledDataset, Provenance, Splits,
    UnlabeledDataset,
};
pub use model::{header_path, history_path, ModelHeader, TrainedModel};
pub use objective::{
    domain_bce, localization_residuals, loss_ae, loss_baseline, loss_gr, reconstruction_residuals, Method,
};
pub use train::{train, train_with, EpochStats, TrainConfig, DEFAULT_CHUNK};
