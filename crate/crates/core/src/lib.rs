//! Trace analysis and scheduling toolkit for 3D-parallel LLM training.
//!
//! The crate reconstructs cross-rank communication dependencies from
//! per-rank traces, aligns clocks onto a reference timeline, localizes
//! straggler GPUs with a multi-stage heuristic, and validates itself
//! against a built-in discrete-event simulator of tensor/pipeline/data
//! parallel training with fault injection. It also models the dynamic
//! pipeline scheduler (depth-first vs breadth-first task traversal) and
//! the deadlock-free bit-vector communication coordinator.
//!
//! Modules:
//! - [`model`]: ranks, topology, trace events.
//! - [`trace_io`]: per-rank trace parsing, Chrome Tracing merge/emit.
//! - [`dependency`]: matching events into communication instances.
//! - [`alignment`]: clock alignment over matched instances.
//! - [`detect`]: straggler candidate selection and root-cause analysis.
//! - [`sim`]: the deterministic workload simulator and fault injection.
//! - [`dpp`]: task-matrix scheduling policies and the async channel model.
//! - [`fbd`]: virtual/physical rank mapping and the communication
//!   coordinator.

pub mod alignment;
pub mod dependency;
pub mod detect;
pub mod dpp;
pub mod fbd;
pub mod model;
pub mod sim;
pub mod trace_io;
