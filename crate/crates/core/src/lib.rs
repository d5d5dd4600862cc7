//! Engine for wide-search tasks: a planner decomposes a query into a task
//! matrix plus a reusable prompt template, a batched executor fans the
//! instantiated prompts out to solver agents, and a reducer validates the
//! aggregated table and repairs gaps with targeted delta patches. An
//! experiential memory accumulates per-task records and distilled hints so
//! later plans can skip strategies that already failed.
//!
//! Module map:
//!
//! * [`types`] -- shared data model (queries, matrices, templates, batching
//!   strategies, decisions, result tables, utilities, trace events).
//! * [`mapping`] -- template filling and batch planning.
//! * [`executor`] -- per-batch retry/fallback loop, parallel plan execution,
//!   and the JSON tool-call loop for solver agents.
//! * [`reducer`] -- completeness validation, delta-patch construction, keyed
//!   merge, and the bounded patch loop.
//! * [`memory`] -- embedded record store, hint pool with integer scoring,
//!   retrieval, prior composition, clustering, and distillation.
//! * [`metrics`] -- cell normalization, table-level scores, aggregation, and
//!   utility labeling.
//! * [`backends`] -- chat/embedding provider traits, mock and HTTP
//!   implementations, and the two-stage planner.
//! * [`simenv`] -- seeded synthetic corpus with search/crawl tools and a
//!   scripted solver for deterministic end-to-end runs.
//! * [`engine`] -- orchestration: single runs, multi-trial instances, and
//!   benchmark sweeps.
//! * [`trace`] -- append-only run trace with strictly ordered events.

#![forbid(unsafe_code)]

pub mod backends;
pub mod engine;
pub mod executor;
pub mod mapping;
pub mod memory;
pub mod metrics;
pub mod reducer;
pub mod simenv;
pub mod trace;
pub mod types;

pub use types::{
    AtomicTask, Batch, BatchManifest, BatchStrategy, Decision, LabelRule, Query, ResultTable,
    Schema, TaskMatrix, Template, TraceEvent, TraceStage, Utility, ValidationError,
};
