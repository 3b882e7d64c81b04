//! Attention-guided discriminative-region localization and joint
//! age-distribution learning, end to end on synthetic data.
//!
//! The crate is organized around the two training phases:
//!
//! * [`nn`] — a small deterministic conv/dense network core with manual
//!   backpropagation, Adam, gradient checking, and checkpointing.
//! * [`ldl`] — label-distribution math: soft labels, Gaussian targets,
//!   expectation regression, the KL regularizer, and their gradients.
//! * [`attention`] — class activation maps, threshold masks, box extraction,
//!   cropping, and region erasure.
//! * [`synth`] — a procedural radiograph-like dataset whose discriminative
//!   regions are known by construction, plus dataset file I/O.
//! * [`metrics`] — MAE, IoU, AP50, distribution diagnostics, sweeps.
//! * [`pipeline`] — two-phase experiment orchestration and reports.

pub mod attention;
pub mod ldl;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod tensor;
