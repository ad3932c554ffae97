//! Post-training attention compression for diffusion transformers.
//!
//! Three reuse techniques cut the attention cost of a CFG-guided sampler:
//! window attention with a cached full-minus-window residual, reuse of an
//! earlier step's attention output, and reuse of the conditional branch's
//! output by the unconditional branch. A greedy search picks one technique
//! per (step, layer) under a loss budget, and an analytic model counts the
//! attention FLOPs a plan spends.

pub mod attention;
pub mod cost_model;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod plan_search;
pub mod sharing;

pub use error::{Error, Result};
