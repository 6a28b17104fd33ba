//! Discrete-event simulator of a continuous-batching LLM inference
//! server, plus the batch-size scheduling library it exercises.
//!
//! The crate models a single accelerator serving token-generation
//! requests under a KV-cache token budget. Batch-size policies decide,
//! step by step, how many requests may decode together:
//!
//! - `static`: a fixed operator-chosen batch size;
//! - `memory`: a chance-constrained bound keeping the probability of
//!   exhausting the token budget below a tolerance, linearized through a
//!   safety buffer so each step only needs the current mean length;
//! - `sla`: a latency-feedback search holding decode-step time inside an
//!   SLA deadband;
//! - `combined`: the minimum of the memory and SLA bounds.
//!
//! Modules mirror that split: [`workload`] generates request streams,
//! [`costmodel`] calibrates step/prefill latency, [`memory`] holds the
//! chance-constraint math, [`policy`] the decision procedures,
//! [`engine`] the simulator, [`metrics`] summaries and capacity search,
//! and [`experiment`] the config-driven runner behind the CLI.

pub mod costmodel;
pub mod engine;
pub mod experiment;
pub mod memory;
pub mod metrics;
pub mod policy;
pub mod workload;

pub use costmodel::LatencyModel;
pub use engine::{EngineConfig, EngineMode, SimResult};
pub use experiment::{ExperimentConfig, SweepAxis};
pub use memory::MemoryConfig;
pub use metrics::Summary;
pub use policy::{BatchPolicy, PolicyKind};
pub use workload::{LengthMoments, RequestSpec};
