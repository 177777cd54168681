//! Background-aware representation learning for image clustering.
//!
//! This crate implements cIDFD: instance discrimination with feature
//! decorrelation, extended with a contrastive-analysis setting. Two encoders
//! are trained in sequence — a background encoder on a nuisance-only dataset,
//! then a target encoder whose contrastive loss re-weights negative pairs by
//! the similarity of their background features. With the re-weighting
//! switched off (all weights 1) the method reduces exactly to plain IDFD.
//!
//! The pieces:
//!
//! - [`core`]: unit-norm features, memory banks, temperatures, checkpoints.
//! - [`losses`]: the instance-discrimination, feature-decorrelation, and
//!   contrastive instance-discrimination kernels with analytic gradients.
//! - [`encoder`]: small CNN encoders mapping images to the unit sphere.
//! - [`data`]: synthetic striped-digit dataset construction, IDX reading,
//!   image-directory ingestion, augmentation.
//! - [`trainer`]: the two-stage training loop with moving-average banks.
//! - [`cluster_eval`]: k-means and clustering metrics (ACC / NMI / ARI).
//! - [`analysis`]: pair-type similarity statistics and 2-D projection export.
//! - [`config`] / [`cli`]: experiment configuration and the command-line
//!   entry points.
//!
//! The companion guide under `book/` walks through each concept; its code
//! snippets compile as doc-tests of this crate.

pub mod analysis;
pub mod cli;
pub mod cluster_eval;
pub mod config;
pub mod core;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod nn;
pub mod trainer;

pub mod book;

pub use error::{Error, Result};
