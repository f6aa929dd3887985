//! Instance search with person-exclusion safeguards.
//!
//! The crate is organised along the pipeline:
//!
//! - [`dataset`]: domain records, the synthetic latent-factor generator and
//!   line-delimited dataset files.
//! - [`losses`]: multi-similarity loss with hard-pair mining and the
//!   confusion loss over a forbidden identity set, with analytic gradients.
//! - [`embedder`]: a small trainable embedder (linear or one hidden layer),
//!   AdamW and the balanced mini-batch training loop.
//! - [`index`]: exact cosine search with per-entry exclusion flags.
//! - [`exclusion`]: simulated detector, IoU, NMS, Hungarian matching and the
//!   four-case index exclusion front-end.
//! - [`metrics`]: AP, mAP, mAP@R and rank-k evaluation protocols.
//! - [`probes`]: partial-region (crop / part) queries against the mitigations.
//! - [`harness`]: experiment configuration, the four-arm comparison and the
//!   Pareto hyperparameter search.

pub mod dataset;
pub mod embedder;
pub mod error;
pub mod exclusion;
pub mod harness;
pub mod index;
pub mod losses;
pub mod metrics;
pub mod probes;
pub mod rng;

pub use error::{Error, Result};
