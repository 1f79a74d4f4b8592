use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{
    accept_annotation, accept_record, edit_distance_ratio, levenshtein, AnnotationError, AnnotationRecord,
    AnnotationTiming, AuthorKind, FeedbackAnnotation, RefinementSubmission, RejectReason, Verdict,
};
use crate::model::{ProgramSample, RenderedTask, TaskId};
use crate::sandbox::{eval_source, EvalOutcome, SandboxConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Open,
    Claimed,
    Submitted,
    Accepted,
    Rejected,
}

impl ItemStatus {
    fn rank(self) -> u8 {
        match self {
            ItemStatus::Open | ItemStatus::Claimed => 0,
            ItemStatus::Submitted => 1,
            ItemStatus::Accepted | ItemStatus::Rejected => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }

    /// Forward moves, plus open and claimed in either direction.
    pub fn can_move_to(self, next: ItemStatus) -> bool {
        !self.is_terminal() && next.rank() >= self.rank() && self != next
    }

    fn label(self) -> &'static str {
        match self {
            ItemStatus::Open => "open",
            ItemStatus::Claimed => "claimed",
            ItemStatus::Submitted => "submitted",
            ItemStatus::Accepted => "accepted",
            ItemStatus::Rejected => "rejected",
        }
    }
}

/// One task awaiting feedback. Item ids are task ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub task: RenderedTask,
    pub failing_programs: Vec<ProgramSample>,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_verdict: Option<Verdict>,
    #[serde(default)]
    pub attempts: u32,
}

impl QueueItem {
    pub fn task_id(&self) -> TaskId {
        self.task.task_id
    }
}

/// Queue listing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub task_id: TaskId,
    pub status: ItemStatus,
    pub claimed_by: Option<String>,
    pub failing_program_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub items: Vec<ItemView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub program_index: usize,
    pub feedback_text: String,
    pub refinement_text: String,
    #[serde(default)]
    pub bug_tags: Vec<String>,
    #[serde(default)]
    pub bugs_addressed: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionReceipt {
    pub task_id: TaskId,
    pub status: ItemStatus,
    pub verdict: Verdict,
    pub edit_distance: usize,
    pub edit_ratio: f64,
    pub eval: EvalOutcome,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct QueueState {
    items: BTreeMap<TaskId, QueueItem>,
}

type Clock = Box<dyn Fn() -> f64 + Send + Sync>;

/// Annotation queue with a single-writer state store. All mutations hold
/// one lock; sandbox runs happen outside it.
pub struct AnnotationService {
    state: Mutex<QueueState>,
    sandbox: SandboxConfig,
    persist_path: Option<PathBuf>,
    clock: Clock,
}

fn wall_clock() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl AnnotationService {
    pub fn new(items: Vec<QueueItem>, sandbox: SandboxConfig) -> Self {
        AnnotationService {
            state: Mutex::new(QueueState {
                items: items.into_iter().map(|i| (i.task_id(), i)).collect(),
            }),
            sandbox,
            persist_path: None,
            clock: Box::new(wall_clock),
        }
    }

    /// One open item per task that has at least one failing program.
    pub fn from_pool(
        tasks: &BTreeMap<TaskId, RenderedTask>,
        failing: &[ProgramSample],
        sandbox: SandboxConfig,
    ) -> Result<Self, AnnotationError> {
        let mut by_task: BTreeMap<TaskId, Vec<ProgramSample>> = BTreeMap::new();
        for p in failing {
            if p.passed() != Some(false) {
                return Err(AnnotationError::TargetNotFailing(p.id.clone()));
            }
            by_task.entry(p.task_id).or_default().push(p.clone());
        }
        let mut items = Vec::with_capacity(by_task.len());
        for (task_id, programs) in by_task {
            let task = tasks
                .get(&task_id)
                .ok_or_else(|| AnnotationError::UnknownItem(task_id.to_string()))?;
            items.push(QueueItem {
                task: task.clone(),
                failing_programs: programs,
                status: ItemStatus::Open,
                claimed_by: None,
                claimed_at: None,
                record: None,
                last_verdict: None,
                attempts: 0,
            });
        }
        Ok(Self::new(items, sandbox))
    }

    /// Persists state to `path` after every mutation. Existing state at
    /// `path` replaces the in-memory queue.
    pub fn with_persistence(mut self, path: impl Into<PathBuf>) -> Result<Self, AnnotationError> {
        let path = path.into();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let loaded: QueueState =
                serde_json::from_str(&text).map_err(|e| AnnotationError::Records(e.to_string()))?;
            self.state = Mutex::new(loaded);
        }
        self.persist_path = Some(path);
        self.persist(&self.lock())?;
        Ok(self)
    }

    pub fn with_clock(mut self, clock: impl Fn() -> f64 + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn sandbox_config(&self) -> &SandboxConfig {
        &self.sandbox
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist(&self, state: &QueueState) -> Result<(), AnnotationError> {
        let Some(path) = &self.persist_path else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(state).map_err(|e| AnnotationError::Records(e.to_string()))?;
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn list(&self) -> QueueSnapshot {
        let state = self.lock();
        QueueSnapshot {
            items: state
                .items
                .values()
                .map(|i| ItemView {
                    task_id: i.task_id(),
                    status: i.status,
                    claimed_by: i.claimed_by.clone(),
                    failing_program_count: i.failing_programs.len(),
                })
                .collect(),
        }
    }

    pub fn item(&self, task_id: TaskId) -> Result<QueueItem, AnnotationError> {
        self.lock()
            .items
            .get(&task_id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownItem(task_id.to_string()))
    }

    /// Returns the annotator's current claim, or claims the open item with
    /// the lowest task id. `Ok(None)` when nothing is open.
    pub fn next_item(&self, annotator: &str) -> Result<Option<QueueItem>, AnnotationError> {
        let annotator = non_empty(annotator, "annotator")?;
        let mut state = self.lock();
        if let Some(item) = state
            .items
            .values()
            .find(|i| i.status == ItemStatus::Claimed && i.claimed_by.as_deref() == Some(annotator))
        {
            return Ok(Some(item.clone()));
        }
        let Some(task_id) = state
            .items
            .values()
            .find(|i| i.status == ItemStatus::Open)
            .map(QueueItem::task_id)
        else {
            return Ok(None);
        };
        let now = (self.clock)();
        let item = state.items.get_mut(&task_id).expect("id taken from map");
        item.status = ItemStatus::Claimed;
        item.claimed_by = Some(annotator.to_string());
        item.claimed_at = Some(now);
        let claimed = item.clone();
        self.persist(&state)?;
        tracing::info!(task_id, annotator, "item claimed");
        Ok(Some(claimed))
    }

    /// Claims a specific item. Re-claiming one's own item is a no-op.
    pub fn claim(&self, annotator: &str, task_id: TaskId) -> Result<QueueItem, AnnotationError> {
        let annotator = non_empty(annotator, "annotator")?;
        let now = (self.clock)();
        let mut state = self.lock();
        let item = item_mut(&mut state, task_id)?;
        match (item.status, item.claimed_by.as_deref()) {
            (ItemStatus::Claimed, Some(holder)) if holder == annotator => return Ok(item.clone()),
            (ItemStatus::Claimed, Some(holder)) => {
                return Err(AnnotationError::Conflict {
                    item: task_id.to_string(),
                    holder: holder.to_string(),
                })
            }
            (ItemStatus::Open, _) => {}
            (status, _) => return Err(invalid(task_id, status, "claim")),
        }
        item.status = ItemStatus::Claimed;
        item.claimed_by = Some(annotator.to_string());
        item.claimed_at = Some(now);
        let claimed = item.clone();
        self.persist(&state)?;
        Ok(claimed)
    }

    pub fn release(&self, annotator: &str, task_id: TaskId) -> Result<QueueItem, AnnotationError> {
        let mut state = self.lock();
        let item = item_mut(&mut state, task_id)?;
        check_holder(item, annotator, "release")?;
        item.status = ItemStatus::Open;
        item.claimed_by = None;
        item.claimed_at = None;
        let released = item.clone();
        self.persist(&state)?;
        Ok(released)
    }

    /// Evaluates a draft refinement without touching queue state.
    pub fn run_tests(&self, task_id: TaskId, program_text: &str) -> Result<EvalOutcome, AnnotationError> {
        let task = self.item(task_id)?.task;
        Ok(eval_source(program_text, &task, &self.sandbox)?)
    }

    /// Evaluates the refinement and applies every acceptance clause that
    /// does not need a reviewer. A refinement that fails tests or edits too
    /// much leaves the item claimed so the annotator can revise it; otherwise
    /// the item moves to `submitted` and waits for review.
    pub fn submit(
        &self,
        annotator: &str,
        task_id: TaskId,
        request: &SubmitRequest,
    ) -> Result<SubmissionReceipt, AnnotationError> {
        non_empty(&request.feedback_text, "feedback_text")?;
        non_empty(&request.refinement_text, "refinement_text")?;
        let (task, target, claimed_at) = {
            let state = self.lock();
            let item = state
                .items
                .get(&task_id)
                .ok_or_else(|| AnnotationError::UnknownItem(task_id.to_string()))?;
            check_holder(item, annotator, "submit")?;
            let target = item
                .failing_programs
                .get(request.program_index)
                .cloned()
                .ok_or_else(|| AnnotationError::NoSuchProgram {
                    item: task_id.to_string(),
                    index: request.program_index,
                })?;
            (item.task.clone(), target, item.claimed_at.unwrap_or_default())
        };

        let eval = eval_source(&request.refinement_text, &task, &self.sandbox)?.without_timing();
        let annotation = FeedbackAnnotation {
            id: format!("a{task_id}"),
            task_id,
            target_program: target,
            feedback_text: request.feedback_text.clone(),
            author: AuthorKind::Human,
            bug_tags: request.bug_tags.clone(),
            bugs_addressed: request.bugs_addressed,
            verified_correct: false,
        };
        annotation.validate()?;
        let submission = RefinementSubmission {
            eval: Some(eval.clone()),
            ..RefinementSubmission::new(&annotation, request.refinement_text.clone())
        };
        // Verification is the reviewer's job; everything else is decided now.
        let automatic = accept_annotation(
            &FeedbackAnnotation {
                verified_correct: true,
                ..annotation.clone()
            },
            &submission,
        )?;
        let verdict = match automatic {
            Verdict::Accept => Verdict::Reject(RejectReason::Unverified),
            rejected => rejected,
        };
        let edit_distance = submission.edit_distance;
        let edit_ratio = edit_distance_ratio(&request.refinement_text, &annotation.target_program.program_text);

        let mut state = self.lock();
        let item = item_mut(&mut state, task_id)?;
        check_holder(item, annotator, "submit")?;
        item.attempts += 1;
        item.last_verdict = Some(verdict.clone());
        if verdict == Verdict::Reject(RejectReason::Unverified) {
            item.status = ItemStatus::Submitted;
            item.record = Some(AnnotationRecord {
                annotation,
                refinement: Some(submission),
                timing: Some(AnnotationTiming {
                    claimed_at,
                    submitted_at: (self.clock)(),
                }),
            });
        }
        let receipt = SubmissionReceipt {
            task_id,
            status: item.status,
            verdict,
            edit_distance,
            edit_ratio,
            eval,
        };
        self.persist(&state)?;
        tracing::info!(task_id, annotator, status = item_label(receipt.status), "submission recorded");
        Ok(receipt)
    }

    /// Records the reviewer's verdict on the feedback and applies the full
    /// acceptance filter.
    pub fn review(&self, task_id: TaskId, verified: bool) -> Result<Verdict, AnnotationError> {
        let mut state = self.lock();
        let item = item_mut(&mut state, task_id)?;
        if item.status != ItemStatus::Submitted {
            return Err(invalid(task_id, item.status, "review"));
        }
        let record = item.record.as_mut().expect("submitted items carry a record");
        record.annotation.verified_correct = verified;
        let verdict = accept_record(record)?;
        item.status = if verdict.is_accept() {
            ItemStatus::Accepted
        } else {
            ItemStatus::Rejected
        };
        item.last_verdict = Some(verdict.clone());
        self.persist(&state)?;
        Ok(verdict)
    }

    /// Accepted records in task-id order.
    pub fn export_accepted(&self) -> Vec<AnnotationRecord> {
        self.lock()
            .items
            .values()
            .filter(|i| i.status == ItemStatus::Accepted)
            .filter_map(|i| i.record.clone())
            .collect()
    }
}

fn item_label(status: ItemStatus) -> &'static str {
    status.label()
}

fn non_empty<'a>(value: &'a str, field: &'static str) -> Result<&'a str, AnnotationError> {
    if value.trim().is_empty() {
        Err(AnnotationError::Empty(field))
    } else {
        Ok(value)
    }
}

fn item_mut(state: &mut QueueState, task_id: TaskId) -> Result<&mut QueueItem, AnnotationError> {
    state
        .items
        .get_mut(&task_id)
        .ok_or_else(|| AnnotationError::UnknownItem(task_id.to_string()))
}

fn invalid(task_id: TaskId, status: ItemStatus, action: &'static str) -> AnnotationError {
    AnnotationError::InvalidState {
        item: task_id.to_string(),
        status: status.label().to_string(),
        action,
    }
}

fn check_holder(item: &QueueItem, annotator: &str, action: &'static str) -> Result<(), AnnotationError> {
    if item.status != ItemStatus::Claimed {
        return Err(invalid(item.task_id(), item.status, action));
    }
    match item.claimed_by.as_deref() {
        Some(holder) if holder == annotator => Ok(()),
        holder => Err(AnnotationError::Conflict {
            item: item.task_id().to_string(),
            holder: holder.unwrap_or_default().to_string(),
        }),
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Distance between a draft and the original, as the UI gauge shows it.
pub fn edit_distance_query(original: &str, draft: &str) -> (usize, f64) {
    (levenshtein(draft, original), edit_distance_ratio(draft, original))
}
