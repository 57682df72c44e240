//! depthscope: training-dynamics diagnostics for spurious-feature detection.
//!
//! The crate bundles a small deterministic training engine with the analyses
//! built on top of it:
//!
//! - [`tensor`] / [`tape`] / [`optim`]: dense tensors, reverse-mode autodiff,
//!   SGD/Adam — enough to train small classifiers on a desk.
//! - [`model`]: classifier specs with registered probe points, including a
//!   permutation-invariant patch-pooled head.
//! - [`data`]: synthetic glyph datasets with controllable spurious
//!   correlations, interventions, domino compositions, and the IDX / DSTF
//!   file formats.
//! - [`probe`] / [`pd`]: per-layer k-NN probes, prediction depth with the
//!   undefined-PD extension, depth histograms and the early-peak detector.
//! - [`info`]: pointwise usable-information estimates, conditional
//!   entropy, and the depth-separation gap check.
//! - [`saliency`] / [`baselines`]: soft-kNN saliency maps, ensemble-entropy
//!   difficulty, core-only accuracy, and the harmful-vs-benign verdict.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod info;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pd;
pub mod probe;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, LayerSpec, ModelSpec, ProbePolicy, TrainedModel};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{Grads, NodeId, Tape};
pub use tensor::{Dtype, Scalar, Tensor};

/// Engine version stamped into reports and checkpoints.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
