//! Simulator and learning stack for cloud-edge LLM request scheduling.
//!
//! Edge servers keep a vector cache of past question/answer embeddings and
//! decide, per request, whether to serve the cached answer, enhance the
//! request with cached context before calling the cloud LLM, or call the
//! cloud LLM directly. The decision policy is trained with multi-agent PPO
//! (shared actor, central critic) assisted by expert demonstrations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod marl;
pub mod nn;
pub mod simenv;
pub mod vecstore;
pub mod workload;

pub use error::{Error, Result};
