//! The guide, embedded.
//!
//! Each chapter of `book/` is included here as module documentation, so
//! every code block in the guide compiles and runs under `cargo test --doc`
//! — the book cannot drift from the library.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/features-and-banks.md")]
pub mod features_and_banks {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/two-stage-training.md")]
pub mod two_stage_training {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}

#[doc = include_str!("../../../book/src/running-experiments.md")]
pub mod running_experiments {}
