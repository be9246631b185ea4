//! Condensed-sample-guided model inversion for data-free knowledge distillation.
//!
//! A generator is trained to invert a frozen teacher. When a small set of
//! condensed (or few-shot real) samples is available, a class-conditional
//! feature discriminator pulls the teacher's penultimate features of the
//! synthetic samples toward those of the guidance samples, class by class.
//! The student is distilled on a pool that mixes guidance and synthetic
//! samples.
//!
//! Module map:
//! - [`models`]: classifier registry, generator, discriminator, checkpoints.
//! - [`inversion`]: inversion losses, augmentation, real/fake pair sets, the
//!   inversion step and reset policy.
//! - [`guidance`]: labeled image sets, condensed-set file format, condenser and
//!   few-shot sampling.
//! - [`distill`]: KD loss, the synthetic pool and the epoch loop.
//! - [`harness`]: evaluation, alignment diagnostics, projections and studies.
//! - [`config`]: the JSON run configuration tree.
//! - [`experiment`]: config-driven loading, teacher caching and run directories.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod harness;
pub mod inversion;
pub mod models;
pub mod rng;

pub use error::{Error, Result};
