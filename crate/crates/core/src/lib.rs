//! Desk-scale simulator for preference-loss training, retrieval-aware
//! expert routing, and federated adaptive reasoning over toy policies and
//! synthetic domain corpora.
//!
//! The crate is organized around the pipeline phases:
//!
//! - [`policy`] / [`mdpo`]: differentiable toy policies and the composite
//!   preference loss with its trainer.
//! - [`knowledge`] / [`routing`]: per-domain vector stores, exact top-K
//!   retrieval, and softmax gating over standardized retrieval scores.
//! - [`metacog`]: expert dependency graph and the stability-adjusted
//!   confidence estimator.
//! - [`federation`] / [`aggregation`]: quorum-halting site loops and
//!   consensus over their answers.
//! - [`harness`]: synthetic world generation, end-to-end pipeline runs,
//!   sweeps, and reports.

pub mod aggregation;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod harness;
pub mod knowledge;
pub mod math;
pub mod mdpo;
pub mod metacog;
pub mod policy;
pub mod routing;

pub use error::{Error, Result};
