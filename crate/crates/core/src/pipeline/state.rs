use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Seeds;
use super::{ExampleKind, FineTuneExample, PipelineError, RefineVariant};
use crate::annotation::{AnnotationRecord, AuthorKind};
use crate::backend::{JobStatus, TrainerJob};
use crate::metrics::{PassReport, TaskTally};
use crate::model::{ProgramSample, SplitAssignment, TaskId};
use crate::sandbox::{write_eval_log, EvalLogRecord};
use crate::seeds::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sample,
    CollectFeedback,
    Refine,
    Assemble,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Sample,
        Stage::CollectFeedback,
        Stage::Refine,
        Stage::Assemble,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn prerequisite(self) -> Option<Stage> {
        let idx = Stage::ALL.iter().position(|s| *s == self)?;
        idx.checked_sub(1).map(|i| Stage::ALL[i])
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::CollectFeedback => "collect-feedback",
            Stage::Refine => "refine",
            Stage::Assemble => "assemble",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A dataset file inside the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub count: usize,
    pub digest: String,
}

/// Refinements for one feedback variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub variant: RefineVariant,
    pub refiner_backend: String,
    /// Annotation used for each task (after shuffling, for the ablation).
    pub annotation_ids: BTreeMap<TaskId, String>,
    /// Passing refinements only.
    pub passing: BTreeMap<TaskId, Vec<ProgramSample>>,
    pub tallies: BTreeMap<TaskId, TaskTally>,
}

impl RefineResult {
    pub fn tally_list(&self) -> Vec<TaskTally> {
        self.tallies.values().copied().collect()
    }
}

/// Everything a run has produced so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_fingerprint: String,
    pub seeds: Seeds,
    #[serde(default)]
    pub last_completed: Option<Stage>,
    #[serde(default)]
    pub splits: Option<SplitAssignment>,
    #[serde(default)]
    pub zero_correct: BTreeMap<TaskId, bool>,
    /// Base-model samples for every task in a split, with outcomes.
    #[serde(default)]
    pub samples: BTreeMap<TaskId, Vec<ProgramSample>>,
    /// Training-split annotations, one per task.
    #[serde(default)]
    pub annotations: BTreeMap<TaskId, AnnotationRecord>,
    /// Refine-split annotations with human refinements.
    #[serde(default)]
    pub refiner_annotations: BTreeMap<TaskId, AnnotationRecord>,
    /// Zero-correct training tasks still without feedback.
    #[serde(default)]
    pub pending_tasks: Vec<TaskId>,
    #[serde(default)]
    pub refinement: Option<RefineResult>,
    #[serde(default)]
    pub shuffled_refinement: Option<RefineResult>,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetRef>,
    #[serde(default)]
    pub jobs: BTreeMap<String, TrainerJob>,
    #[serde(default)]
    pub reports: BTreeMap<String, PassReport>,
    /// Length in bytes of the event log that belongs to completed stages.
    #[serde(default)]
    pub events_committed: u64,
}

impl RunState {
    pub fn new(config_fingerprint: String, seeds: Seeds) -> Self {
        RunState {
            config_fingerprint,
            seeds,
            last_completed: None,
            splits: None,
            zero_correct: BTreeMap::new(),
            samples: BTreeMap::new(),
            annotations: BTreeMap::new(),
            refiner_annotations: BTreeMap::new(),
            pending_tasks: Vec::new(),
            refinement: None,
            shuffled_refinement: None,
            datasets: BTreeMap::new(),
            jobs: BTreeMap::new(),
            reports: BTreeMap::new(),
            events_committed: 0,
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.last_completed.is_some_and(|done| done >= stage)
    }

    /// Failing base-model samples of zero-correct tasks in the refine and
    /// training splits: the pool offered for annotation.
    pub fn annotation_pool(&self) -> Vec<ProgramSample> {
        let Some(splits) = &self.splits else {
            return Vec::new();
        };
        splits
            .refine_ids
            .iter()
            .chain(&splits.train_ids)
            .filter_map(|id| self.samples.get(id))
            .flatten()
            .filter(|s| s.passed() == Some(false))
            .cloned()
            .collect()
    }

    pub fn check_invariants(&self) -> Result<(), PipelineError> {
        for (task_id, record) in self.annotations.iter().chain(&self.refiner_annotations) {
            if record.annotation.task_id != *task_id || record.annotation.target_program.passed() != Some(false) {
                return Err(PipelineError::State(format!(
                    "annotation {} does not target a failing program of task {task_id}",
                    record.annotation.id
                )));
            }
        }
        for result in self.refinement.iter().chain(&self.shuffled_refinement) {
            for sample in result.passing.values().flatten() {
                if sample.passed() != Some(true) {
                    return Err(PipelineError::State(format!(
                        "refinement {} is stored as passing without a passing outcome",
                        sample.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Append-only provenance record. Events carry no timestamps so that
/// reruns produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    StageCompleted {
        stage: Stage,
    },
    Sampled {
        task_id: TaskId,
        sample_id: String,
        passed: bool,
    },
    SplitsAssigned {
        refine: usize,
        train: usize,
        test: usize,
    },
    AnnotationIngested {
        annotation_id: String,
        task_id: TaskId,
        target_sample_id: String,
        author: AuthorKind,
    },
    AnnotationRejected {
        annotation_id: String,
        task_id: TaskId,
        reason: String,
    },
    FeedbackPending {
        task_id: TaskId,
    },
    Refined {
        variant: RefineVariant,
        annotation_id: String,
        task_id: TaskId,
        sample_id: String,
        passed: bool,
    },
    ExampleAssembled {
        example_id: String,
        kind: ExampleKind,
        task_id: TaskId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_sample_id: Option<String>,
        annotation_id: String,
    },
    JobSubmitted {
        key: String,
        job_id: String,
        dataset_ref: String,
        example_count: usize,
    },
    JobFinished {
        key: String,
        job_id: String,
        status: JobStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backend_ref: Option<String>,
    },
    Evaluated {
        label: String,
        backend: String,
        task_count: usize,
    },
}

const STATE_FILE: &str = "state.json";
const EVENTS_FILE: &str = "events.jsonl";
const EVAL_LOG_FILE: &str = "eval_log.jsonl";
/// Wall-clock durations live apart from the eval log so that every other
/// file in a run directory is reproducible byte for byte.
const TIMINGS_FILE: &str = "timings.jsonl";
pub(crate) const DATASET_DIR: &str = "datasets";

/// Where state, events and datasets live. The in-memory variant backs
/// throwaway runs such as the scaling sweep.
pub(crate) enum Store {
    Dir(PathBuf),
    Memory {
        events: Vec<Event>,
        datasets: BTreeMap<String, Vec<FineTuneExample>>,
    },
}

impl Store {
    pub(crate) fn memory() -> Self {
        Store::Memory {
            events: Vec::new(),
            datasets: BTreeMap::new(),
        }
    }

    pub(crate) fn load_state(&self) -> Result<Option<RunState>, PipelineError> {
        let Store::Dir(dir) = self else {
            return Ok(None);
        };
        let path = dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Serde(format!("{}: {e}", path.display())))
    }

    /// Drops any event-log tail left by an interrupted stage, appends the
    /// stage's events, then atomically replaces the state file.
    pub(crate) fn commit(&mut self, state: &mut RunState, events: &[Event]) -> Result<(), PipelineError> {
        match self {
            Store::Memory { events: log, .. } => {
                log.extend_from_slice(events);
                Ok(())
            }
            Store::Dir(dir) => {
                std::fs::create_dir_all(&*dir)?;
                let path = dir.join(EVENTS_FILE);
                let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
                file.set_len(state.events_committed)?;
                let mut buf = Vec::new();
                for event in events {
                    serde_json::to_writer(&mut buf, event).map_err(|e| PipelineError::Serde(e.to_string()))?;
                    buf.push(b'\n');
                }
                file.write_all(&buf)?;
                file.sync_data()?;
                state.events_committed += buf.len() as u64;
                let text = serde_json::to_string_pretty(state).map_err(|e| PipelineError::Serde(e.to_string()))?;
                crate::annotation::write_atomic(&dir.join(STATE_FILE), text.as_bytes())?;
                Ok(())
            }
        }
    }

    /// Committed events only.
    pub(crate) fn events(&self, state: &RunState) -> Result<Vec<Event>, PipelineError> {
        match self {
            Store::Memory { events, .. } => Ok(events.clone()),
            Store::Dir(dir) => read_events(&dir.join(EVENTS_FILE), state.events_committed),
        }
    }

    pub(crate) fn write_dataset(
        &mut self,
        name: &str,
        examples: &[FineTuneExample],
    ) -> Result<DatasetRef, PipelineError> {
        let mut buf = Vec::new();
        for ex in examples {
            serde_json::to_writer(&mut buf, ex).map_err(|e| PipelineError::Serde(e.to_string()))?;
            buf.push(b'\n');
        }
        let rel = format!("{DATASET_DIR}/{name}.jsonl");
        match self {
            Store::Dir(dir) => crate::annotation::write_atomic(&dir.join(&rel), &buf)?,
            Store::Memory { datasets, .. } => {
                datasets.insert(rel.clone(), examples.to_vec());
            }
        }
        Ok(DatasetRef {
            path: rel,
            count: examples.len(),
            digest: format!("{:016x}", stable_hash(&buf)),
        })
    }

    pub(crate) fn read_dataset(&self, dataset: &DatasetRef) -> Result<Vec<FineTuneExample>, PipelineError> {
        match self {
            Store::Memory { datasets, .. } => datasets
                .get(&dataset.path)
                .cloned()
                .ok_or_else(|| PipelineError::State(format!("missing dataset {}", dataset.path))),
            Store::Dir(dir) => read_dataset_file(&dir.join(&dataset.path)),
        }
    }

    /// Timing-bearing evaluation records; not part of the reproducible
    /// artifacts.
    pub(crate) fn append_eval_log(&self, records: &[EvalLogRecord]) -> Result<(), PipelineError> {
        if let Store::Dir(dir) = self {
            std::fs::create_dir_all(dir)?;
            let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
            let untimed: Vec<EvalLogRecord> = records
                .iter()
                .map(|r| EvalLogRecord {
                    outcome: r.outcome.without_timing(),
                    ..r.clone()
                })
                .collect();
            write_eval_log(std::io::BufWriter::new(open(EVAL_LOG_FILE)?), &untimed)?;
            let mut timings = std::io::BufWriter::new(open(TIMINGS_FILE)?);
            for r in records {
                let line = serde_json::json!({"sample_id": r.sample_id, "seconds": r.outcome.duration.as_secs_f64()});
                writeln!(timings, "{line}")?;
            }
            timings.flush()?;
        }
        Ok(())
    }
}

pub(crate) fn read_events(path: &Path, committed: u64) -> Result<Vec<Event>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(std::io::Read::take(file, committed));
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Serde(e.to_string()))?);
    }
    Ok(out)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<FineTuneExample>, PipelineError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Serde(e.to_string()))?);
    }
    Ok(out)
}
