//! Deterministic simulator for dual-prompt personalized federated learning.
//!
//! The crate models a federation of clients that share a frozen two-encoder
//! backbone and train only two small prompt structures: a globally shared
//! *task prompt* and a per-client *data prompt* that parameterizes the affine
//! map from the task prompt to an image prompt. Clients train locally,
//! exchange prompts and validation losses through a message transport, and
//! personalize their data prompts by weighting peer updates according to how
//! much those updates improve the client's own validation loss.
//!
//! Layers, bottom-up:
//!
//! * [`surrogate`] — the frozen-backbone classifier, its analytic gradients,
//!   local SGD, and evaluation;
//! * [`data`] — synthetic non-IID task and client dataset generation;
//! * [`agg`] — the aggregation calculus: loss-complement task-prompt weights,
//!   client partitioning, and personalized data-prompt weight normalization;
//! * [`protocol`] — server/client state, messages, transport, and the
//!   round engine with full per-round audit records;
//! * [`baselines`] — local-only, prompt-averaging, and proximal-regularized
//!   reference methods run on identical fixtures;
//! * [`harness`] — experiment orchestration, artifact emission, comparisons,
//!   and the late-joining-client study;
//! * [`selftest`] — the built-in verification suite behind the `selftest`
//!   CLI subcommand.
//!
//! Everything is reproducible bitwise from an experiment seed: randomness is
//! fanned out through [`seed`] into named ChaCha streams, floating-point
//! reductions run in fixed orders, and parallel fan-out never reorders
//! results.

pub mod agg;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod fixture;
pub mod harness;
pub mod metrics;
pub mod protocol;
pub mod seed;
pub mod selftest;
pub mod surrogate;

pub use error::{Error, Result};
