//! Weakly-supervised audio-visual video parsing at desk scale.
//!
//! The crate trains and evaluates a snippet-level audio-visual event parser
//! from video-level labels only. It bundles:
//!
//! - [`tensor`]: a small f64 tensor library with reverse-mode autodiff,
//! - [`han`]: hybrid-attention feature aggregation with selectable
//!   self/cross-attention per modality,
//! - [`mmil`]: attentive multimodal multiple-instance pooling,
//! - [`objectives`]: label smoothing and the weakly-supervised /
//!   modality-guided cross-entropy losses,
//! - [`trainer`]: Adam, the step learning-rate schedule, and the epoch loop,
//! - [`metrics`]: segment- and event-level F-scores (audio, visual,
//!   audio-visual, Type@AV, Event@AV),
//! - [`dataset`]: feature-file and manifest I/O plus a synthetic
//!   planted-event generator,
//! - [`analysis`]: audio-visual attention mass and loss-curve comparisons.
//!
//! The `examples/` directory is the guided tour; the `avvp` binary wires the
//! same library calls into a small command-line workflow.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod han;
pub mod metrics;
pub mod mmil;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{AvvpError, Result};
pub use tensor::{Graph, NodeId, Tensor};
