//! Domain types, MBPP-style dataset ingestion, prompt rendering and split logic.
//!
//! Tasks are read from line-delimited JSON records using the public MBPP
//! field names (`task_id`, `text`, `code`, `test_list`, `test_setup_code`),
//! so the real benchmark file loads without conversion.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sandbox::EvalOutcome;

pub type TaskId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invalid task: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("invalid task {id}: {reason}")]
    InvalidTask { id: TaskId, reason: String },
    #[error("duplicate task id {id} on line {line}")]
    DuplicateId { id: TaskId, line: usize },
    #[error("no zero-correct flag for task {0}")]
    MissingFlag(TaskId),
    #[error("invalid split configuration: {0}")]
    InvalidSplitConfig(String),
    #[error("program text must be non-empty")]
    EmptyProgram,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A programming problem with its ordered unit-test suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MbppRecord", into = "MbppRecord")]
pub struct Task {
    pub id: TaskId,
    pub description: String,
    pub gold_program: Option<String>,
    /// Assertion source lines; the first one is embedded in the prompt.
    pub tests: Vec<String>,
    pub setup_code: Option<String>,
}

impl Task {
    pub fn new(
        id: TaskId,
        description: impl Into<String>,
        tests: Vec<String>,
    ) -> Result<Self, ModelError> {
        let task = Task {
            id,
            description: description.into(),
            gold_program: None,
            tests,
            setup_code: None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn with_gold_program(mut self, code: impl Into<String>) -> Self {
        self.gold_program = Some(code.into()).filter(|c: &String| !c.is_empty());
        self
    }

    pub fn with_setup_code(mut self, code: impl Into<String>) -> Self {
        self.setup_code = Some(code.into()).filter(|c: &String| !c.is_empty());
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::InvalidTask {
            id: self.id,
            reason: reason.to_string(),
        };
        if self.id == 0 {
            return Err(invalid("id must be positive"));
        }
        if self.description.trim().is_empty() {
            return Err(invalid("description is empty"));
        }
        if self.tests.is_empty() {
            return Err(invalid("test list is empty"));
        }
        for test in &self.tests {
            if test.trim().is_empty() {
                return Err(invalid("test statement is empty"));
            }
            if test.contains('\n') || test.contains('\r') {
                return Err(invalid("test statement spans multiple lines"));
            }
        }
        Ok(())
    }
}

/// On-disk record, field-compatible with the public MBPP release.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MbppRecord {
    task_id: i64,
    text: String,
    #[serde(default)]
    code: String,
    test_list: Vec<String>,
    #[serde(default)]
    test_setup_code: String,
    #[serde(default)]
    challenge_test_list: Vec<String>,
}

impl TryFrom<MbppRecord> for Task {
    type Error = String;

    fn try_from(record: MbppRecord) -> Result<Self, Self::Error> {
        let id = TaskId::try_from(record.task_id)
            .ok()
            .filter(|id| *id > 0)
            .ok_or_else(|| format!("task_id {} is not a positive integer", record.task_id))?;
        let task = Task {
            id,
            description: record.text,
            gold_program: Some(record.code).filter(|c| !c.is_empty()),
            tests: record.test_list,
            setup_code: Some(record.test_setup_code).filter(|c| !c.is_empty()),
        };
        task.validate().map_err(|e| e.to_string())?;
        Ok(task)
    }
}

impl From<Task> for MbppRecord {
    fn from(task: Task) -> Self {
        MbppRecord {
            task_id: i64::from(task.id),
            text: task.description,
            code: task.gold_program.unwrap_or_default(),
            test_list: task.tests,
            test_setup_code: task.setup_code.unwrap_or_default(),
            challenge_test_list: Vec::new(),
        }
    }
}

/// Reads tasks from line-delimited records, preserving file order.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn load_dataset<R: BufRead>(reader: R) -> Result<Vec<Task>, ModelError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MbppRecord =
            serde_json::from_str(&line).map_err(|source| ModelError::Parse {
                line: line_no,
                source,
            })?;
        let task = Task::try_from(record).map_err(|reason| ModelError::InvalidRecord {
            line: line_no,
            reason,
        })?;
        if !seen.insert(task.id) {
            return Err(ModelError::DuplicateId {
                id: task.id,
                line: line_no,
            });
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_dataset_file(path: impl AsRef<Path>) -> Result<Vec<Task>, ModelError> {
    load_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(mut writer: W, tasks: &[Task]) -> Result<(), ModelError> {
    for task in tasks {
        let line = serde_json::to_string(task).expect("task records always serialize");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

const DOCSTRING_FENCE: &str = "\"\"\"";

/// A task as presented to a model: description plus one embedded test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedTask {
    pub task_id: TaskId,
    pub description: String,
    pub prompt_text: String,
    pub prompt_test: String,
    pub heldout_tests: Vec<String>,
    pub setup_code: Option<String>,
}

impl RenderedTask {
    /// Tests that decide `Eval`. Single-test tasks fall back to the embedded
    /// test so that evaluation is never vacuous.
    pub fn eval_tests(&self) -> Vec<&str> {
        if self.heldout_tests.is_empty() {
            vec![self.prompt_test.as_str()]
        } else {
            self.heldout_tests.iter().map(String::as_str).collect()
        }
    }

    /// Description and embedded test without the docstring fence; used as the
    /// task section of refinement prompts.
    pub fn task_text(&self) -> String {
        format!("{}\n{}", self.description, self.prompt_test)
    }
}

pub fn render_task(task: &Task) -> RenderedTask {
    let prompt_test = task.tests[0].clone();
    let prompt_text = format!(
        "{DOCSTRING_FENCE}\n{}\n{}\n{DOCSTRING_FENCE}\n",
        task.description, prompt_test
    );
    RenderedTask {
        task_id: task.id,
        description: task.description.clone(),
        prompt_text,
        prompt_test,
        heldout_tests: task.tests[1..].to_vec(),
        setup_code: task.setup_code.clone(),
    }
}

/// Recovers the test line embedded by [`render_task`].
pub fn extract_embedded_test(prompt_text: &str) -> Option<&str> {
    let body = prompt_text
        .strip_prefix(DOCSTRING_FENCE)?
        .strip_prefix('\n')?
        .strip_suffix('\n')?
        .strip_suffix(DOCSTRING_FENCE)?
        .strip_suffix('\n')?;
    body.rsplit('\n').next()
}

/// Inclusive range of task IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRange {
    pub start: TaskId,
    pub end: TaskId,
}

impl IdRange {
    pub const fn new(start: TaskId, end: TaskId) -> Self {
        IdRange { start, end }
    }

    pub fn contains(&self, id: TaskId) -> bool {
        self.start <= id && id <= self.end
    }

    fn overlaps(&self, other: &IdRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// ID ranges for the three splits. IDs outside every range (by default the
/// MBPP prompt split, 1-10) are never used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub refine: IdRange,
    pub train: IdRange,
    pub test: IdRange,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            refine: IdRange::new(111, 310),
            train: IdRange::new(311, 974),
            test: IdRange::new(11, 110),
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ranges = [("refine", self.refine), ("train", self.train), ("test", self.test)];
        for (name, r) in &ranges {
            if r.start == 0 || r.start > r.end {
                return Err(ModelError::InvalidSplitConfig(format!(
                    "{name} range {}..={} is empty or starts at 0",
                    r.start, r.end
                )));
            }
        }
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                if ranges[i].1.overlaps(&ranges[j].1) {
                    return Err(ModelError::InvalidSplitConfig(format!(
                        "{} and {} ranges overlap",
                        ranges[i].0, ranges[j].0
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Refine,
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub refine_ids: BTreeSet<TaskId>,
    pub train_ids: BTreeSet<TaskId>,
    pub test_ids: BTreeSet<TaskId>,
}

impl SplitAssignment {
    pub fn split_of(&self, id: TaskId) -> Option<Split> {
        if self.refine_ids.contains(&id) {
            Some(Split::Refine)
        } else if self.train_ids.contains(&id) {
            Some(Split::Train)
        } else if self.test_ids.contains(&id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, split: Split) -> &BTreeSet<TaskId> {
        match split {
            Split::Refine => &self.refine_ids,
            Split::Train => &self.train_ids,
            Split::Test => &self.test_ids,
        }
    }
}

/// Assigns tasks to splits.
///
/// Refine and train splits only take tasks on which the base model produced
/// no correct sample; the test split takes every task in its range.
pub fn assign_splits(
    tasks: &[Task],
    zero_correct: &BTreeMap<TaskId, bool>,
    config: &SplitConfig,
) -> Result<SplitAssignment, ModelError> {
    config.validate()?;
    let mut out = SplitAssignment::default();
    for task in tasks {
        let id = task.id;
        if config.test.contains(id) {
            out.test_ids.insert(id);
            continue;
        }
        let target = if config.refine.contains(id) {
            &mut out.refine_ids
        } else if config.train.contains(id) {
            &mut out.train_ids
        } else {
            continue;
        };
        match zero_correct.get(&id) {
            Some(true) => {
                target.insert(id);
            }
            Some(false) => {}
            None => return Err(ModelError::MissingFlag(id)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramOrigin {
    BaseModel,
    Refiner,
    Human,
    ExternalModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingInfo {
    pub temperature: f64,
    pub index: u32,
}

/// A candidate program with its provenance and (once evaluated) its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSample {
    pub id: String,
    pub task_id: TaskId,
    pub program_text: String,
    pub origin: ProgramOrigin,
    pub backend: String,
    pub sampling: SamplingInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalOutcome>,
}

impl ProgramSample {
    pub fn new(
        id: impl Into<String>,
        task_id: TaskId,
        program_text: impl Into<String>,
        origin: ProgramOrigin,
        backend: impl Into<String>,
        sampling: SamplingInfo,
    ) -> Result<Self, ModelError> {
        let program_text = program_text.into();
        if program_text.trim().is_empty() {
            return Err(ModelError::EmptyProgram);
        }
        Ok(ProgramSample {
            id: id.into(),
            task_id,
            program_text,
            origin,
            backend: backend.into(),
            sampling,
            eval: None,
        })
    }

    pub fn passed(&self) -> Option<bool> {
        self.eval.as_ref().map(|e| e.passed)
    }
}
