//! Minimal reverse-mode differentiation engine.
//!
//! Values live on a [`Tape`]; each op records its inputs and whatever it
//! needs for the backward rule. Parameters are kept in a [`ParamStore`],
//! bound onto a fresh tape per forward pass, and updated with [`sgd_step`].
//!
//! Parallel training builds one tape per fixed-size chunk of a minibatch and
//! sums the chunk gradients in chunk order, so results do not depend on how
//! many threads ran the chunks.

pub mod checkpoint;
pub mod gradcheck;
pub mod grl;
pub(crate) mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{check_params, grad_check, GradCheckReport, Probe, Selection};
pub use grl::{grl_backward, grl_forward, GrlConfig};
pub use optim::sgd_step;
pub use params::{sum_grad_sets, Bound, ParamStore};
pub use tape::{ConvSpec, Gradients, NodeId, Tape, BCE_CLAMP};
pub use tensor::Tensor;
