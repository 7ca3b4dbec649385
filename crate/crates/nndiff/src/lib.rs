//! Whitebox differential testing for small feedforward networks.
//!
//! The toolkit trains desk-scale classifiers, then searches the input space
//! for difference-inducing tests: inputs that functionally similar networks
//! classify differently. The search runs gradient ascent on a joint
//! objective that rewards both differential behavior and the activation of
//! previously uncovered neurons, under domain-specific realism constraints
//! (lighting shifts, occlusion rectangles, additive-only binary features).
//! Generated tests feed back into retraining and training-data pollution
//! detection.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`], [`network`]: dense `f64` tensors, layer specs, recording
//!   forward pass.
//! - [`autodiff`]: reverse-mode gradients of scalar selectors w.r.t. the
//!   input, and parameter gradients for training.
//! - [`coverage`]: neuron coverage tracking and activation overlap.
//! - [`objectives`]: the differential and coverage objectives and their
//!   joint combination.
//! - [`constraints`]: rule-based gradient transforms and domain clamping.
//! - [`generator`]: the seed-cycling gradient-ascent search loop.
//! - [`trainer`]: deterministic SGD training and controlled model variants.
//! - [`applications`]: majority-vote labeling, retraining augmentation,
//!   pollution detection, diversity measurement.
//! - [`dataset`], [`model_io`], [`synth`], [`config`]: IDX/PGM/model file
//!   formats, synthetic digit corpus, flat config files.

pub mod applications;
pub mod autodiff;
pub mod config;
pub mod constraints;
pub mod coverage;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod model_io;
pub mod network;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use network::{ActivationTrace, LayerSpec, Network};
pub use tensor::Tensor;
