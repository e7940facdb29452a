//! Discrete-event simulator of continuous-batching LLM decode serving under
//! intra-request parallelism, with a slack-budgeted per-step branch admission
//! controller and fixed-cap baselines.

pub mod costmodel;
pub mod engine;
pub mod generation;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod workload;
