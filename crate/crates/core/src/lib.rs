//! Fingerprint-based indoor localization under environment change.
//!
//! The pipeline runs bottom-up through these modules:
//!
//! - [`channel_sim`]: two-bounce scattering-cluster environments and the
//!   space-frequency channel they produce at any UE position.
//! - [`fingerprint`]: the angle-delay transform and real two-channel tensors.
//! - [`autodiff`]: tensors, a recorded graph with exact backward rules,
//!   gradient reversal and SGD.
//! - [`nn`]: the convolutional feature extractor with multi-head
//!   self-attention, decoder, location estimator and domain classifier.
//! - [`da`]: datasets, the baseline / autoencoder / gradient-reversal
//!   objectives and training.
//! - [`eval`]: error distributions and the environment similarity estimate.
//! - [`io`]: the binary dataset file format.
//! - [`cli`]: the `dynloc` command line.

pub mod autodiff;
pub mod channel_sim;
pub mod cli;
pub mod cmatrix;
pub mod da;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fingerprint;
pub mod io;
pub mod nn;

pub use error::{Error, Result};
pub use exec::Execution;
