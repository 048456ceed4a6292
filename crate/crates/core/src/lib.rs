//! Parallel-TCP speed testing: a deterministic TCP flow model, throughput and
//! latency estimators, a measurement client and responder, and server
//! selection and scheduling.

pub mod coordinator;
pub mod engine;
pub mod flowmodel;
pub mod metrics;
pub mod responder;
pub mod trace;
