//! Staged orchestrator: sample, collect feedback, refine, assemble,
//! fine-tune, evaluate. Every stage reads and writes a [`RunState`]
//! persisted in a run directory, so a run can stop after any stage and
//! resume with identical results.

mod audit;
mod config;
mod scaling;
mod stages;
mod state;

pub use audit::{audit_lineage, check_split_hygiene, LineageReport};
pub use config::{BackendRefs, FeedbackConfig, FeedbackSourceKind, RunConfig, Seeds};
pub use scaling::{run_scaling_experiment, ScalingPoint};
pub use stages::{
    assemble_final_dataset, assemble_refiner_dataset, refine_with, shortest_failing, Pipeline,
    PipelineContext, RefineVariant,
};
pub use state::{DatasetRef, Event, RefineResult, RunState, Stage};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotationError;
use crate::backend::BackendError;
use crate::metrics::MetricsError;
use crate::model::{ModelError, TaskId};
use crate::prompting::PromptError;
use crate::sandbox::SandboxError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} needs {needs} to have completed first")]
    StageOrder { stage: Stage, needs: Stage },
    #[error("run directory was created with a different configuration (state {state}, config {config})")]
    ConfigChanged { state: String, config: String },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {task_id} belongs to the {found} split, expected {expected}")]
    WrongSplit {
        task_id: TaskId,
        expected: &'static str,
        found: String,
    },
    #[error("no passing refinements to assemble")]
    EmptyRefinements,
    #[error("fine-tuning job {job} failed: {diagnostics}")]
    TrainingFailed { job: String, diagnostics: String },
    #[error("requested {requested} tasks but only {available} are available")]
    NotEnoughTasks { requested: usize, available: usize },
    #[error("invalid run state: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    /// Input: task, incorrect program and feedback. Target: human refinement.
    RefinerTraining,
    /// Input: task prompt. Target: a passing model refinement.
    FinalTraining,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneExample {
    pub id: String,
    pub task_id: TaskId,
    pub input_text: String,
    pub target_text: String,
    pub kind: ExampleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sample_id: Option<String>,
}
