//! Optimization engine for structured context playbooks.
//!
//! An agent's behavior is steered by a playbook: named sections of addressable
//! entries injected into its prompt. This crate treats that playbook as the
//! learned artifact of an iterative loop: execute tasks under the current
//! playbook, reflect on failures to produce structured diagnostics, and apply
//! constrained edits. Six mechanisms sit on top of the base loop (task
//! batching, grouped rollouts, dual-trace credit assignment, a structured
//! reflection schema, failure replay, and a rolling optimizer state document),
//! each individually toggleable from the run config.
//!
//! The crate ships a hermetic environment (`ruleworld`) with fully scripted
//! agent/reflector/mutator/state-updater backends so the whole loop runs
//! deterministically offline, plus a provider-agnostic chat-model client for
//! model-backed roles.

pub mod cli;
pub mod config;
pub mod execution;
pub mod metrics;
pub mod model;
pub mod mutation;
pub mod playbook;
pub mod reflection;
pub mod replay;
pub mod rng;
pub mod ruleworld;
pub mod state;
pub mod trainer;

pub use config::RunConfig;
pub use playbook::{diff, EditOp, Entry, EntryId, Playbook, Section};
pub use trainer::Trainer;
