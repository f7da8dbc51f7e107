//! mechex — unsupervised recovery of independent image transformations by a
//! committee of competing convolutional experts.
//!
//! A set of expert networks is shown images that were each warped by one of
//! several unknown transformations (translations, contrast inversion, noise).
//! A discriminator trained against a clean reference sample scores every
//! expert's attempt at restoring each image; per example, only the highest
//! scoring expert is trained. Under this winner-take-all pressure the experts
//! specialize, each converging to the approximate inverse of exactly one
//! transformation — with no labels telling them which.
//!
//! The crate is organized as:
//! - [`tensor`]: dense tensors, reverse-mode autodiff, Adam, checkpoints
//! - [`dataset`]: IDX ingestion, preprocessing, the unpaired half-split
//! - [`mechanisms`]: the ground-truth transformations and their inverses
//! - [`models`]: expert / discriminator / reference-classifier networks
//! - [`competition`]: the winner-take-all adversarial training loop
//! - [`evaluation`]: assignment matrices, accuracy recovery, generalization
//! - [`config`] / [`experiment`]: declarative runs, presets, suites
//! - [`figures`]: dependency-free SVG renditions of every result
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `mechex` binary for the end-to-end pipeline.

pub mod competition;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod figures;
pub mod mechanisms;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
