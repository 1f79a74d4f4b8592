use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::pipeline::FineTuneExample;
use crate::seeds::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 5e-6,
            batch_size: 32,
            epochs: 2,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(BackendError::InvalidRequest("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(BackendError::InvalidRequest(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Allowed hyperparameter values for strict submissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDomain {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<u32>,
    pub epochs: Vec<u32>,
}

impl Default for SweepDomain {
    fn default() -> Self {
        SweepDomain {
            learning_rates: vec![1e-6, 5e-6, 1e-5],
            batch_sizes: vec![32, 64, 128],
            epochs: vec![1, 2, 5],
        }
    }
}

impl SweepDomain {
    pub fn contains(&self, hp: &Hyperparams) -> bool {
        self.learning_rates
            .iter()
            .any(|lr| (lr - hp.learning_rate).abs() <= 1e-12 * lr.abs())
            && self.batch_sizes.contains(&hp.batch_size)
            && self.epochs.contains(&hp.epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    fn rank(self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Succeeded | JobStatus::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerJob {
    pub id: String,
    pub dataset_ref: String,
    pub example_count: usize,
    pub hyperparams: Hyperparams,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resulting_backend_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

/// Out-of-process fine-tuning service.
pub trait TrainerBackend: Send + Sync {
    fn name(&self) -> &str;

    fn submit(
        &self,
        dataset_ref: &str,
        examples: &[FineTuneExample],
        hyperparams: &Hyperparams,
    ) -> Result<TrainerJob, BackendError>;

    fn poll(&self, job: &TrainerJob) -> Result<TrainerJob, BackendError>;
}

pub fn submit_finetune(
    trainer: &dyn TrainerBackend,
    dataset_ref: &str,
    examples: &[FineTuneExample],
    hyperparams: &Hyperparams,
    strict_domain: Option<&SweepDomain>,
) -> Result<TrainerJob, BackendError> {
    if examples.is_empty() {
        return Err(BackendError::InvalidRequest("fine-tune dataset is empty".into()));
    }
    hyperparams.validate()?;
    if let Some(domain) = strict_domain {
        if !domain.contains(hyperparams) {
            return Err(BackendError::InvalidRequest(format!(
                "hyperparameters {hyperparams:?} are outside the sweep domain"
            )));
        }
    }
    trainer.submit(dataset_ref, examples, hyperparams)
}

/// Polls once. Terminal jobs are returned unchanged without contacting the
/// trainer; a reported status regression is a protocol error.
pub fn poll(trainer: &dyn TrainerBackend, job: &TrainerJob) -> Result<TrainerJob, BackendError> {
    if job.status.is_terminal() {
        return Ok(job.clone());
    }
    let next = trainer.poll(job)?;
    if next.id != job.id {
        return Err(BackendError::Protocol(format!(
            "polled job {} but trainer answered for {}",
            job.id, next.id
        )));
    }
    if next.status.rank() < job.status.rank() {
        return Err(BackendError::Protocol(format!(
            "job {} regressed from {:?} to {:?}",
            job.id, job.status, next.status
        )));
    }
    if next.status == JobStatus::Succeeded && next.resulting_backend_ref.is_none() {
        return Err(BackendError::Protocol(format!(
            "job {} succeeded without a resulting backend",
            job.id
        )));
    }
    Ok(next)
}

pub fn wait_for_job(
    trainer: &dyn TrainerBackend,
    job: &TrainerJob,
    interval: Duration,
    timeout: Duration,
) -> Result<TrainerJob, BackendError> {
    let started = Instant::now();
    let mut current = job.clone();
    while !current.status.is_terminal() {
        if started.elapsed() >= timeout {
            return Err(BackendError::Transport {
                attempts: 0,
                message: format!("job {} not finished after {timeout:?}", current.id),
            });
        }
        thread::sleep(interval);
        current = poll(trainer, &current)?;
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTrainerOutcome {
    pub min_examples: usize,
    pub backend_ref: String,
}

/// Scripted trainer. The resulting backend is the outcome with the largest
/// `min_examples` not exceeding the dataset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTrainer {
    pub name: String,
    pub outcomes: Vec<MockTrainerOutcome>,
    /// Polls needed before the job finishes; 0 finishes on submit.
    #[serde(default)]
    pub polls_to_finish: u32,
    #[serde(default)]
    pub fail: bool,
}

impl MockTrainer {
    pub fn new(name: impl Into<String>, backend_ref: impl Into<String>) -> Self {
        MockTrainer {
            name: name.into(),
            outcomes: vec![MockTrainerOutcome {
                min_examples: 0,
                backend_ref: backend_ref.into(),
            }],
            polls_to_finish: 0,
            fail: false,
        }
    }

    fn result_for(&self, example_count: usize) -> Option<String> {
        self.outcomes
            .iter()
            .filter(|o| o.min_examples <= example_count)
            .max_by_key(|o| o.min_examples)
            .map(|o| o.backend_ref.clone())
    }

    fn finish(&self, mut job: TrainerJob) -> TrainerJob {
        match self.result_for(job.example_count).filter(|_| !self.fail) {
            Some(backend) => {
                job.status = JobStatus::Succeeded;
                job.resulting_backend_ref = Some(backend);
            }
            None => {
                job.status = JobStatus::Failed;
                job.diagnostics = Some("scripted training failure".into());
            }
        }
        job
    }
}

impl TrainerBackend for MockTrainer {
    fn name(&self) -> &str {
        &self.name
    }

    fn submit(
        &self,
        dataset_ref: &str,
        examples: &[FineTuneExample],
        hyperparams: &Hyperparams,
    ) -> Result<TrainerJob, BackendError> {
        let job = TrainerJob {
            id: format!(
                "{}-{:016x}-{}",
                self.name,
                stable_hash(dataset_ref.as_bytes()),
                examples.len()
            ),
            dataset_ref: dataset_ref.to_string(),
            example_count: examples.len(),
            hyperparams: *hyperparams,
            status: JobStatus::Queued,
            resulting_backend_ref: None,
            diagnostics: None,
        };
        Ok(if self.polls_to_finish == 0 {
            self.finish(job)
        } else {
            job
        })
    }

    fn poll(&self, job: &TrainerJob) -> Result<TrainerJob, BackendError> {
        let mut next = job.clone();
        match job.status {
            JobStatus::Queued if self.polls_to_finish > 1 => next.status = JobStatus::Running,
            JobStatus::Queued | JobStatus::Running => next = self.finish(next),
            _ => {}
        }
        Ok(next)
    }
}
