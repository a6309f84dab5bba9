//! Randomized vignette experiments on language models with synthetic personas.
//!
//! `srct` simulates populations of persona-conditioned language-model
//! subjects. Each subject answers legal vignettes in its own isolated
//! session, and the resulting judgments are compared across randomized
//! conditions and against human baselines.
//!
//! The pipeline has six stages, each usable on its own:
//!
//! - [`population`]: sample, load and render synthetic personas.
//! - [`design`]: expand factorial designs into seeded trial plans.
//! - [`dispatch`]: run plans against chat providers (HTTP or the in-process
//!   mock). Concurrency and rate are bounded, and retries are seeded.
//! - [`extraction`]: turn free-text completions into structured answers.
//! - [`stats`]: composite scores, Welch and bootstrap effects, alignment,
//!   and TOST equivalence.
//! - [`report`]: CSV tables, figure data and the run manifest.
//!
//! [`pipeline`] wires the stages to a run directory, and [`cli`] exposes them
//! as the `srct` binary. Runnable walkthroughs for each capability live in
//! the crate's `examples/` directory.

pub mod baseline;
pub mod cli;
pub mod design;
pub mod dispatch;
pub mod extraction;
pub mod fixtures;
pub mod jsonl;
pub mod pipeline;
pub mod population;
pub mod report;
pub mod seed;
pub mod stats;
pub mod template;

mod error;

pub use error::{Error, Result};
