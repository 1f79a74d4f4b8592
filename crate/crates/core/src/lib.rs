//! Core of the feedback-driven code refinement pipeline.
//!
//! A base model samples programs for each task; the failing ones receive
//! natural-language feedback; a refiner turns (task, program, feedback) into
//! repaired programs; only repairs that pass the held-out unit tests are kept
//! and used to fine-tune the base model.
//!
//! Modules map onto the stages of that loop:
//!
//! - [`model`]: tasks, dataset ingestion, prompt rendering, split assignment.
//! - [`sandbox`]: unit-test verification in isolated child processes.
//! - [`metrics`]: pass@k, aggregate reports, perplexity, feedback statistics.
//! - [`backend`]: completion / scoring / fine-tuning backends and the scripted mock.
//! - [`prompting`]: generation, refinement and feedback-elicitation prompts.
//! - [`annotation`]: edit distance, acceptance filters, the annotation queue.
//! - [`pipeline`]: the staged orchestrator with persisted run state.

pub mod annotation;
pub mod backend;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod sandbox;
mod seeds;

pub use model::{ProgramOrigin, ProgramSample, RenderedTask, SplitAssignment, SplitConfig, Task};
pub use sandbox::{EvalOutcome, FailureKind, SandboxConfig};
