//! Desk-scale sparse mixture-of-experts transformer.
//!
//! The crate covers the whole loop around a top-k gated MoE decoder: dense
//! kernels ([`tensor`]), the MoE layer with dense and grouped execution
//! ([`moe`]), the transformer and its parameter accounting ([`model`],
//! [`config`]), hand-derived backward passes and training ([`train`]),
//! routing-trace analytics ([`trace`], [`analytics`]), an expert-parallel
//! and caching simulator ([`ep_sim`]) and small long-context evaluations
//! ([`eval`]).

pub mod analytics;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ep_sim;
pub mod eval;
pub mod error;
pub mod model;
pub mod moe;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trace;
pub mod train;

pub use config::{CountMode, ModelConfig};
pub use error::{Error, Result};
pub use model::TransformerModel;
pub use moe::{GateDecision, MoELayer};
pub use tensor::{Scalar, Tensor};
pub use trace::RoutingTrace;
