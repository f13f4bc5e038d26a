//! Deterministic simulated LLM serving engine.
//!
//! A pseudo-LLM decoder, a paged KV block manager with prefix caching, a
//! continuous-batching scheduler with chunked prefill and a LoRA adapter
//! manager, plus three injectable fault families. [`SimCore`] is the
//! single-owner state machine; [`server`] exposes it over HTTP.

pub mod blocks;
pub mod config;
pub mod decode;
pub mod engine;
pub mod server;

pub use blocks::{BlockCounters, BlockId, BlockManager, KvBlock};
pub use config::{FaultSpec, NearTie, SimConfig, SimConfigError};
pub use decode::{pseudo_decode, DecodeParams, Distribution};
pub use engine::{
    drift_condition, EngineRequest, SchedulerState, SimCore, SimTelemetry, StepOutput,
    TokenEmission,
};
