use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audit::{audit_lineage, check_split_hygiene, LineageReport};
use super::config::{FeedbackSourceKind, RunConfig};
use super::state::{Event, RefineResult, RunState, Stage, Store};
use super::{ExampleKind, FineTuneExample, PipelineError};
use crate::annotation::{
    accept_record, read_records, shuffle_feedback, AnnotationRecord, AuthorKind, FeedbackAnnotation, Verdict,
};
use crate::backend::{
    self, submit_finetune, wait_for_job, CompletionRequest, JobStatus, ModelBackend, Registry, SweepDomain,
};
use crate::metrics::{self, aggregate, PassReport, TaskTally};
use crate::model::{
    assign_splits, load_dataset_file, render_task, ProgramOrigin, ProgramSample, RenderedTask, SamplingInfo, Split,
    SplitAssignment, Task, TaskId,
};
use crate::prompting::{
    build_feedback_elicitation_prompt, build_generation_prompt, build_refine_prompt, exemplars_from_records,
    extract_completion_code, PromptError, RefinePromptTemplate, GENERATION_STOPS,
};
use crate::sandbox::{eval_batch, EvalLogRecord, EvalOutcome, FailureKind, TestResult};
use crate::seeds::{derive_seed, stable_hash};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineVariant {
    /// Each program is refined with the feedback written for it.
    Matched,
    /// Feedback deranged across tasks (the unrelated-feedback ablation).
    Shuffled,
}

/// Inputs that stay fixed for the lifetime of a run.
pub struct PipelineContext {
    pub config: RunConfig,
    pub tasks: Vec<Task>,
    pub rendered: BTreeMap<TaskId, RenderedTask>,
    pub registry: Registry,
    pub template: RefinePromptTemplate,
}

impl PipelineContext {
    pub fn new(
        config: RunConfig,
        tasks: Vec<Task>,
        registry: Registry,
        template: RefinePromptTemplate,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let rendered = tasks.iter().map(|t| (t.id, render_task(t))).collect();
        Ok(PipelineContext {
            config,
            tasks,
            rendered,
            registry,
            template,
        })
    }

    /// Loads the dataset, backends, template and exemplars a config names.
    /// Relative paths must already be resolved.
    pub fn from_config(config: RunConfig) -> Result<Self, PipelineError> {
        let tasks = load_dataset_file(&config.dataset)?;
        let registry = Registry::from_specs(&config.models, &config.trainers, std::path::Path::new("."))?;
        let mut template = match &config.template {
            Some(path) => RefinePromptTemplate::load(path)?,
            None => RefinePromptTemplate::default(),
        };
        if let Some(path) = &config.exemplars {
            let records = read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
            let rendered: BTreeMap<TaskId, RenderedTask> = tasks.iter().map(|t| (t.id, render_task(t))).collect();
            template = template.with_exemplars(exemplars_from_records(&records, &rendered)?)?;
        }
        Self::new(config, tasks, registry, template)
    }

    fn task(&self, id: TaskId) -> Result<&RenderedTask, PipelineError> {
        self.rendered.get(&id).ok_or(PipelineError::UnknownTask(id))
    }

    fn split_task_ids(&self) -> Vec<TaskId> {
        let s = &self.config.splits;
        self.tasks
            .iter()
            .map(|t| t.id)
            .filter(|&id| s.refine.contains(id) || s.train.contains(id) || s.test.contains(id))
            .collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
    }
}

/// The failing program with the shortest text; ties go to the earlier
/// sample.
pub fn shortest_failing(samples: &[ProgramSample]) -> Option<&ProgramSample> {
    samples
        .iter()
        .filter(|s| s.passed() == Some(false) && !s.program_text.trim().is_empty())
        .min_by_key(|s| s.program_text.chars().count())
}

fn stream_seed(base: u64, key: &str) -> u64 {
    derive_seed(base, stable_hash(key.as_bytes()))
}

fn unusable_completion(message: &str) -> EvalOutcome {
    EvalOutcome {
        passed: false,
        failure_kind: Some(FailureKind::RuntimeError),
        duration: Duration::ZERO,
        per_test: vec![TestResult {
            test_index: 0,
            passed: false,
            message: message.to_string(),
        }],
    }
}

/// Evaluates samples that do not carry an outcome yet. Identical programs
/// for the same task run once.
fn evaluate(
    ctx: &PipelineContext,
    store: &Store,
    samples: &mut [ProgramSample],
) -> Result<(), PipelineError> {
    let mut unique: Vec<ProgramSample> = Vec::new();
    let mut index: HashMap<(TaskId, &str), usize> = HashMap::new();
    let mut slots = Vec::with_capacity(samples.len());
    for s in samples.iter() {
        if s.eval.is_some() {
            slots.push(None);
            continue;
        }
        let key = (s.task_id, s.program_text.as_str());
        let slot = *index.entry(key).or_insert_with(|| {
            unique.push(s.clone());
            unique.len() - 1
        });
        slots.push(Some(slot));
    }
    let outcomes = eval_batch(&unique, |id| ctx.rendered.get(&id), &ctx.config.sandbox, ctx.config.parallelism);
    let mut resolved = Vec::with_capacity(outcomes.len());
    let mut log = Vec::with_capacity(outcomes.len());
    for (sample, outcome) in unique.iter().zip(outcomes) {
        let outcome = outcome?;
        log.push(EvalLogRecord {
            sample_id: sample.id.clone(),
            task_id: sample.task_id,
            outcome: outcome.clone(),
        });
        resolved.push(outcome.without_timing());
    }
    store.append_eval_log(&log)?;
    for (s, slot) in samples.iter_mut().zip(slots) {
        if let Some(slot) = slot {
            s.eval = Some(resolved[slot].clone());
        }
    }
    Ok(())
}

/// Draws `samples_per_task` programs per task from `backend`.
pub(crate) fn sample_programs(
    ctx: &PipelineContext,
    store: &Store,
    backend: &dyn ModelBackend,
    task_ids: &[TaskId],
    seed: u64,
    stream: &str,
) -> Result<BTreeMap<TaskId, Vec<ProgramSample>>, PipelineError> {
    let config = &ctx.config;
    let pool = ctx.pool()?;
    let drawn: Vec<(TaskId, Vec<String>)> = pool.install(|| {
        task_ids
            .par_iter()
            .map(|&id| {
                let task = ctx.task(id)?;
                let request = CompletionRequest {
                    prompt: build_generation_prompt(task),
                    num_samples: config.samples_per_task,
                    temperature: config.temperature,
                    max_tokens: config.max_tokens,
                    stop_sequences: GENERATION_STOPS.iter().map(|s| s.to_string()).collect(),
                    seed: Some(stream_seed(seed, &format!("{stream}/{id}"))),
                };
                Ok((id, backend::complete(backend, &request)?))
            })
            .collect::<Result<_, PipelineError>>()
    })?;
    let mut all = Vec::new();
    for (id, completions) in drawn {
        for (i, text) in completions.into_iter().enumerate() {
            all.push(make_sample(
                format!("t{id}-{stream}{i}"),
                id,
                text.trim_end(),
                ProgramOrigin::BaseModel,
                backend.name(),
                config.temperature,
                i,
            ));
        }
    }
    evaluate(ctx, store, &mut all)?;
    let mut out: BTreeMap<TaskId, Vec<ProgramSample>> = BTreeMap::new();
    for s in all {
        out.entry(s.task_id).or_default().push(s);
    }
    Ok(out)
}

/// Builds a sample; empty text becomes a failing sample that is never run.
fn make_sample(
    id: String,
    task_id: TaskId,
    text: &str,
    origin: ProgramOrigin,
    backend: &str,
    temperature: f64,
    index: usize,
) -> ProgramSample {
    let sampling = SamplingInfo {
        temperature,
        index: index as u32,
    };
    ProgramSample::new(id.clone(), task_id, text, origin, backend, sampling).unwrap_or_else(|_| ProgramSample {
        id,
        task_id,
        program_text: String::new(),
        origin,
        backend: backend.to_string(),
        sampling,
        eval: Some(unusable_completion("empty completion")),
    })
}

pub(crate) fn tallies_of(samples: &BTreeMap<TaskId, Vec<ProgramSample>>) -> Vec<TaskTally> {
    samples
        .iter()
        .map(|(&task_id, list)| TaskTally {
            task_id,
            n: list.len() as u64,
            c: list.iter().filter(|s| s.passed() == Some(true)).count() as u64,
        })
        .collect()
}

/// Refines each annotated program `samples_per_task` times and keeps the
/// refinements that pass.
pub fn refine_with(
    ctx: &PipelineContext,
    backend: &dyn ModelBackend,
    annotations: &[FeedbackAnnotation],
    variant: RefineVariant,
    sampling_seed: u64,
) -> Result<(RefineResult, Vec<Event>), PipelineError> {
    refine_inner(ctx, &Store::memory(), backend, annotations, variant, sampling_seed)
}

fn refine_inner(
    ctx: &PipelineContext,
    store: &Store,
    backend: &dyn ModelBackend,
    annotations: &[FeedbackAnnotation],
    variant: RefineVariant,
    sampling_seed: u64,
) -> Result<(RefineResult, Vec<Event>), PipelineError> {
    let config = &ctx.config;
    let marker = match variant {
        RefineVariant::Matched => "r",
        RefineVariant::Shuffled => "x",
    };
    let pool = ctx.pool()?;
    let drawn: Vec<Vec<String>> = pool.install(|| {
        annotations
            .par_iter()
            .map(|a| {
                let task = ctx.task(a.task_id)?;
                let prompt = build_refine_prompt(
                    &ctx.template,
                    task,
                    &a.target_program.program_text,
                    &a.feedback_text,
                    config.refine_shots,
                )?;
                let request = CompletionRequest {
                    prompt,
                    num_samples: config.samples_per_task,
                    temperature: config.temperature,
                    max_tokens: config.max_tokens,
                    stop_sequences: ctx.template.stop_sequences(),
                    // Both variants share a stream so that only the feedback differs.
                    seed: Some(stream_seed(sampling_seed, &format!("refine/{}", a.task_id))),
                };
                Ok(backend::complete(backend, &request)?)
            })
            .collect::<Result<_, PipelineError>>()
    })?;
    let mut all = Vec::new();
    for (a, completions) in annotations.iter().zip(drawn) {
        for (i, raw) in completions.iter().enumerate() {
            let id = format!("t{}-{marker}{i}", a.task_id);
            let text = match extract_completion_code(raw, &ctx.template, &[]) {
                Ok(code) => code,
                Err(PromptError::EmptyCompletion) => String::new(),
                Err(e) => return Err(e.into()),
            };
            all.push(make_sample(
                id,
                a.task_id,
                &text,
                ProgramOrigin::Refiner,
                backend.name(),
                config.temperature,
                i,
            ));
        }
    }
    evaluate(ctx, store, &mut all)?;
    let by_task: BTreeMap<TaskId, &FeedbackAnnotation> = annotations.iter().map(|a| (a.task_id, a)).collect();
    let mut result = RefineResult {
        variant,
        refiner_backend: backend.name().to_string(),
        annotation_ids: by_task.iter().map(|(&t, a)| (t, a.id.clone())).collect(),
        passing: BTreeMap::new(),
        tallies: BTreeMap::new(),
    };
    let mut events = Vec::with_capacity(all.len());
    for sample in all {
        let passed = sample.passed() == Some(true);
        let tally = result.tallies.entry(sample.task_id).or_insert(TaskTally {
            task_id: sample.task_id,
            n: 0,
            c: 0,
        });
        tally.n += 1;
        tally.c += u64::from(passed);
        events.push(Event::Refined {
            variant,
            annotation_id: by_task[&sample.task_id].id.clone(),
            task_id: sample.task_id,
            sample_id: sample.id.clone(),
            passed,
        });
        if passed {
            result.passing.entry(sample.task_id).or_default().push(sample);
        }
    }
    Ok((result, events))
}

/// One passing refinement per task, chosen uniformly under `selection_seed`.
pub fn assemble_final_dataset(
    result: &RefineResult,
    rendered: &BTreeMap<TaskId, RenderedTask>,
    selection_seed: u64,
) -> Result<Vec<FineTuneExample>, PipelineError> {
    let mut out = Vec::new();
    for (&task_id, passing) in &result.passing {
        if passing.is_empty() {
            continue;
        }
        let task = rendered.get(&task_id).ok_or(PipelineError::UnknownTask(task_id))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(selection_seed, u64::from(task_id)));
        let chosen = &passing[rng.random_range(0..passing.len())];
        out.push(FineTuneExample {
            id: format!("final-{task_id}"),
            task_id,
            input_text: build_generation_prompt(task),
            target_text: chosen.program_text.clone(),
            kind: ExampleKind::FinalTraining,
            source_sample_id: Some(chosen.id.clone()),
        });
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyRefinements);
    }
    Ok(out)
}

/// Refiner training pairs from refine-split human refinements. Inputs use
/// the zero-shot refinement prompt.
pub fn assemble_refiner_dataset(
    records: &[AnnotationRecord],
    splits: &SplitAssignment,
    rendered: &BTreeMap<TaskId, RenderedTask>,
    template: &RefinePromptTemplate,
) -> Result<Vec<FineTuneExample>, PipelineError> {
    let zero_shot = RefinePromptTemplate::new(template.markers().clone(), Vec::new())?;
    records
        .iter()
        .map(|r| {
            let a = &r.annotation;
            let found = splits.split_of(a.task_id);
            if found != Some(Split::Refine) {
                return Err(PipelineError::WrongSplit {
                    task_id: a.task_id,
                    expected: "refine",
                    found: found.map_or("no".to_string(), |s| format!("{s:?}").to_lowercase()),
                });
            }
            let refinement = r
                .refinement
                .as_ref()
                .ok_or_else(|| crate::annotation::AnnotationError::MissingRefinement(a.id.clone()))?;
            let task = rendered.get(&a.task_id).ok_or(PipelineError::UnknownTask(a.task_id))?;
            Ok(FineTuneExample {
                id: format!("refiner-{}", a.task_id),
                task_id: a.task_id,
                input_text: build_refine_prompt(
                    &zero_shot,
                    task,
                    &a.target_program.program_text,
                    &a.feedback_text,
                    0,
                )?,
                target_text: refinement.refinement_text.clone(),
                kind: ExampleKind::RefinerTraining,
                source_sample_id: Some(a.target_program.id.clone()),
            })
        })
        .collect()
}

/// A run bound to its context, state and store.
pub struct Pipeline {
    ctx: PipelineContext,
    store: Store,
    state: RunState,
}

impl Pipeline {
    /// Opens or creates a run directory. An existing run must have been
    /// created from an equivalent config.
    pub fn open(ctx: PipelineContext, run_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let store = Store::Dir(run_dir.into());
        let fingerprint = ctx.config.fingerprint();
        let state = match store.load_state()? {
            Some(state) if state.config_fingerprint != fingerprint => {
                return Err(PipelineError::ConfigChanged {
                    state: state.config_fingerprint,
                    config: fingerprint,
                })
            }
            Some(state) => state,
            None => RunState::new(fingerprint, ctx.config.seeds.clone()),
        };
        Ok(Pipeline { ctx, store, state })
    }

    /// A run that keeps everything in memory.
    pub fn in_memory(ctx: PipelineContext) -> Self {
        let state = RunState::new(ctx.config.fingerprint(), ctx.config.seeds.clone());
        Pipeline {
            ctx,
            store: Store::memory(),
            state,
        }
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn context(&self) -> &PipelineContext {
        &self.ctx
    }

    pub fn events(&self) -> Result<Vec<Event>, PipelineError> {
        self.store.events(&self.state)
    }

    pub fn dataset(&self, name: &str) -> Result<Vec<FineTuneExample>, PipelineError> {
        let dataset = self
            .state
            .datasets
            .get(name)
            .ok_or_else(|| PipelineError::State(format!("no dataset named {name}")))?;
        self.store.read_dataset(dataset)
    }

    /// Runs `stage` if it has not run yet. Returns whether it ran.
    pub fn run_stage(&mut self, stage: Stage) -> Result<bool, PipelineError> {
        if self.state.is_complete(stage) {
            tracing::info!(%stage, "stage already complete");
            return Ok(false);
        }
        if let Some(needs) = stage.prerequisite() {
            if !self.state.is_complete(needs) {
                return Err(PipelineError::StageOrder { stage, needs });
            }
        }
        tracing::info!(%stage, "stage starting");
        let mut events = match stage {
            Stage::Sample => self.stage_sample()?,
            Stage::CollectFeedback => self.stage_collect_feedback()?,
            Stage::Refine => self.stage_refine()?,
            Stage::Assemble => self.stage_assemble()?,
            Stage::Finetune => self.stage_finetune()?,
            Stage::Evaluate => self.stage_evaluate()?,
        };
        self.state.check_invariants()?;
        events.push(Event::StageCompleted { stage });
        self.state.last_completed = Some(stage);
        self.store.commit(&mut self.state, &events)?;
        tracing::info!(%stage, "stage complete");
        Ok(true)
    }

    /// Runs every remaining stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<(), PipelineError> {
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn run_all(&mut self) -> Result<(), PipelineError> {
        self.run_until(Stage::Evaluate)
    }

    fn stage_sample(&mut self) -> Result<Vec<Event>, PipelineError> {
        let ctx = &self.ctx;
        let backend = ctx.registry.model(&ctx.config.backends.policy)?;
        let ids = ctx.split_task_ids();
        let samples = sample_programs(ctx, &self.store, backend.as_ref(), &ids, self.state.seeds.sampling, "s")?;
        let zero_correct: BTreeMap<TaskId, bool> = samples
            .iter()
            .map(|(&id, list)| (id, list.iter().all(|s| s.passed() != Some(true))))
            .collect();
        let splits = assign_splits(&ctx.tasks, &zero_correct, &ctx.config.splits)?;
        let mut events: Vec<Event> = samples
            .values()
            .flatten()
            .map(|s| Event::Sampled {
                task_id: s.task_id,
                sample_id: s.id.clone(),
                passed: s.passed() == Some(true),
            })
            .collect();
        events.push(Event::SplitsAssigned {
            refine: splits.refine_ids.len(),
            train: splits.train_ids.len(),
            test: splits.test_ids.len(),
        });
        let tallies = tallies_of(&samples);
        if !tallies.is_empty() {
            self.state
                .reports
                .insert("sampled".into(), aggregate(&tallies, &ctx.config.ks)?);
        }
        let test: Vec<TaskTally> = tallies
            .iter()
            .copied()
            .filter(|t| splits.test_ids.contains(&t.task_id))
            .collect();
        if !test.is_empty() {
            self.state
                .reports
                .insert("baseline".into(), aggregate(&test, &ctx.config.ks)?);
        }
        self.state.samples = samples;
        self.state.zero_correct = zero_correct;
        self.state.splits = Some(splits);
        Ok(events)
    }

    fn splits(&self) -> Result<&SplitAssignment, PipelineError> {
        self.state
            .splits
            .as_ref()
            .ok_or_else(|| PipelineError::State("splits not assigned".into()))
    }

    fn stage_collect_feedback(&mut self) -> Result<Vec<Event>, PipelineError> {
        let feedback = self.ctx.config.feedback.clone();
        let train: Vec<TaskId> = self.splits()?.train_ids.iter().copied().collect();
        let mut events = Vec::new();
        let selected = match feedback.source {
            FeedbackSourceKind::Human => {
                let path = feedback
                    .export
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("feedback.export is required for human feedback".into()))?;
                let records = read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
                events.extend(self.ingest_human(records)?);
                train
            }
            FeedbackSourceKind::Model => {
                let selected = match feedback.task_limit {
                    Some(k) => select_tasks(&train, k, self.state.seeds.selection)?,
                    None => train,
                };
                let (annotations, _) = collect_model_feedback(&self.ctx, &self.state, &selected)?;
                for a in annotations {
                    events.push(ingested(&a));
                    self.state.annotations.insert(
                        a.task_id,
                        AnnotationRecord {
                            annotation: a,
                            refinement: None,
                            timing: None,
                        },
                    );
                }
                selected
            }
        };
        let mut pending: Vec<TaskId> = selected
            .into_iter()
            .filter(|id| !self.state.annotations.contains_key(id))
            .collect();
        pending.sort_unstable();
        for &task_id in &pending {
            events.push(Event::FeedbackPending { task_id });
        }
        if !pending.is_empty() {
            tracing::warn!(count = pending.len(), "tasks left without feedback");
        }
        self.state.pending_tasks = pending;
        Ok(events)
    }

    /// Admits accepted records for zero-correct tasks whose target is a
    /// failing sample of this run; everything else is logged as rejected.
    fn ingest_human(&mut self, mut records: Vec<AnnotationRecord>) -> Result<Vec<Event>, PipelineError> {
        records.sort_by(|a, b| {
            (a.annotation.task_id, &a.annotation.id).cmp(&(b.annotation.task_id, &b.annotation.id))
        });
        let splits = self.splits()?.clone();
        let mut events = Vec::new();
        for record in records {
            let a = &record.annotation;
            let rejection = self.human_rejection(&record, &splits);
            match rejection {
                Some(reason) => {
                    tracing::warn!(annotation = %a.id, %reason, "annotation rejected at ingest");
                    events.push(Event::AnnotationRejected {
                        annotation_id: a.id.clone(),
                        task_id: a.task_id,
                        reason,
                    });
                }
                None => {
                    events.push(ingested(a));
                    let target = match splits.split_of(a.task_id) {
                        Some(Split::Refine) => &mut self.state.refiner_annotations,
                        _ => &mut self.state.annotations,
                    };
                    target.insert(a.task_id, record);
                }
            }
        }
        Ok(events)
    }

    fn human_rejection(&self, record: &AnnotationRecord, splits: &SplitAssignment) -> Option<String> {
        let a = &record.annotation;
        if let Err(e) = a.validate() {
            return Some(e.to_string());
        }
        let in_run = self
            .state
            .samples
            .get(&a.task_id)
            .and_then(|list| list.iter().find(|s| s.id == a.target_program.id));
        match in_run {
            Some(s) if s.program_text == a.target_program.program_text && s.passed() == Some(false) => {}
            Some(_) => return Some("target program is not a failing sample of this run".into()),
            None => return Some("target program is not a sample of this run".into()),
        }
        match accept_record(record) {
            Ok(Verdict::Accept) => {}
            Ok(Verdict::Reject(reason)) => return Some(reason.to_string()),
            Err(e) => return Some(e.to_string()),
        }
        let split = splits.split_of(a.task_id);
        if !matches!(split, Some(Split::Refine | Split::Train)) {
            return Some("task is not in the refine or train split".into());
        }
        if self.state.annotations.contains_key(&a.task_id) || self.state.refiner_annotations.contains_key(&a.task_id)
        {
            return Some("task already has an annotation".into());
        }
        None
    }

    fn refiner_backend(&mut self) -> Result<(String, Vec<Event>), PipelineError> {
        if !self.ctx.config.train_refiner {
            return Ok((self.ctx.config.backends.refiner.clone(), Vec::new()));
        }
        let records: Vec<AnnotationRecord> = self.state.refiner_annotations.values().cloned().collect();
        let examples = assemble_refiner_dataset(&records, self.splits()?, &self.ctx.rendered, &self.ctx.template)?;
        let dataset = self.store.write_dataset("refiner", &examples)?;
        self.state.datasets.insert("refiner".into(), dataset.clone());
        let (job, events) = self.train("refiner", &dataset.path, &examples)?;
        Ok((job, events))
    }

    fn stage_refine(&mut self) -> Result<Vec<Event>, PipelineError> {
        let (refiner, mut events) = self.refiner_backend()?;
        let backend = self.ctx.registry.model(&refiner)?;
        let annotations: Vec<FeedbackAnnotation> =
            self.state.annotations.values().map(|r| r.annotation.clone()).collect();
        let (result, refined) = refine_inner(
            &self.ctx,
            &self.store,
            backend.as_ref(),
            &annotations,
            RefineVariant::Matched,
            self.state.seeds.sampling,
        )?;
        events.extend(refined);
        if !result.tallies.is_empty() {
            self.state
                .reports
                .insert("refine_matched".into(), aggregate(&result.tally_list(), &self.ctx.config.ks)?);
        }
        self.state.refinement = Some(result);
        Ok(events)
    }

    /// Refines the same annotated programs with deranged feedback and
    /// stores the result beside the matched refinements. Does not move the
    /// stage cursor.
    pub fn run_shuffled_ablation(&mut self) -> Result<&RefineResult, PipelineError> {
        if !self.state.is_complete(Stage::CollectFeedback) {
            return Err(PipelineError::StageOrder {
                stage: Stage::Refine,
                needs: Stage::CollectFeedback,
            });
        }
        let annotations: Vec<FeedbackAnnotation> =
            self.state.annotations.values().map(|r| r.annotation.clone()).collect();
        let shuffled = shuffle_feedback(&annotations, self.state.seeds.shuffle)?;
        let refiner = match self.state.jobs.get("refiner").and_then(|j| j.resulting_backend_ref.clone()) {
            Some(r) => r,
            None => self.ctx.config.backends.refiner.clone(),
        };
        let backend = self.ctx.registry.model(&refiner)?;
        let (result, events) = refine_inner(
            &self.ctx,
            &self.store,
            backend.as_ref(),
            &shuffled,
            RefineVariant::Shuffled,
            self.state.seeds.sampling,
        )?;
        self.state
            .reports
            .insert("refine_shuffled".into(), aggregate(&result.tally_list(), &self.ctx.config.ks)?);
        self.state.shuffled_refinement = Some(result);
        self.store.commit(&mut self.state, &events)?;
        Ok(self.state.shuffled_refinement.as_ref().expect("just stored"))
    }

    fn stage_assemble(&mut self) -> Result<Vec<Event>, PipelineError> {
        let result = self
            .state
            .refinement
            .as_ref()
            .ok_or_else(|| PipelineError::State("no refinements".into()))?;
        let examples = assemble_final_dataset(result, &self.ctx.rendered, self.state.seeds.selection)?;
        let refiner_records: Vec<AnnotationRecord> = self.state.refiner_annotations.values().cloned().collect();
        let refiner_examples =
            assemble_refiner_dataset(&refiner_records, self.splits()?, &self.ctx.rendered, &self.ctx.template)?;
        let violations = check_split_hygiene(self.splits()?, examples.iter().chain(&refiner_examples));
        if !violations.is_empty() {
            return Err(PipelineError::State(violations.join("; ")));
        }
        let mut events = Vec::new();
        for ex in &examples {
            events.push(Event::ExampleAssembled {
                example_id: ex.id.clone(),
                kind: ex.kind,
                task_id: ex.task_id,
                source_sample_id: ex.source_sample_id.clone(),
                annotation_id: result.annotation_ids[&ex.task_id].clone(),
            });
        }
        for (ex, record) in refiner_examples.iter().zip(&refiner_records) {
            events.push(Event::ExampleAssembled {
                example_id: ex.id.clone(),
                kind: ex.kind,
                task_id: ex.task_id,
                source_sample_id: ex.source_sample_id.clone(),
                annotation_id: record.annotation.id.clone(),
            });
        }
        let final_ref = self.store.write_dataset("final", &examples)?;
        self.state.datasets.insert("final".into(), final_ref);
        if !refiner_examples.is_empty() {
            let refiner_ref = self.store.write_dataset("refiner", &refiner_examples)?;
            self.state.datasets.insert("refiner".into(), refiner_ref);
        }
        Ok(events)
    }

    /// Submits (or resumes) the trainer job stored under `key` and waits for
    /// it. Returns the resulting backend reference.
    fn train(
        &mut self,
        key: &str,
        dataset_ref: &str,
        examples: &[FineTuneExample],
    ) -> Result<(String, Vec<Event>), PipelineError> {
        let config = &self.ctx.config;
        let trainer = self.ctx.registry.trainer(&config.backends.trainer)?;
        let mut events = Vec::new();
        let job = match self.state.jobs.get(key) {
            Some(job) if job.dataset_ref == dataset_ref && job.status != JobStatus::Failed => job.clone(),
            _ => {
                let strict = SweepDomain::default();
                let job = submit_finetune(
                    trainer.as_ref(),
                    dataset_ref,
                    examples,
                    &config.hyperparams,
                    config.strict_sweep.then_some(&strict),
                )?;
                let submitted = Event::JobSubmitted {
                    key: key.to_string(),
                    job_id: job.id.clone(),
                    dataset_ref: dataset_ref.to_string(),
                    example_count: job.example_count,
                };
                self.state.jobs.insert(key.to_string(), job.clone());
                self.store.commit(&mut self.state, &[submitted])?;
                job
            }
        };
        let done = wait_for_job(
            trainer.as_ref(),
            &job,
            Duration::from_millis(config.trainer_poll_interval_ms),
            Duration::from_secs(config.trainer_timeout_secs),
        )?;
        self.state.jobs.insert(key.to_string(), done.clone());
        events.push(Event::JobFinished {
            key: key.to_string(),
            job_id: done.id.clone(),
            status: done.status,
            backend_ref: done.resulting_backend_ref.clone(),
        });
        match (done.status, done.resulting_backend_ref) {
            (JobStatus::Succeeded, Some(backend)) => Ok((backend, events)),
            _ => {
                self.store.commit(&mut self.state, &events)?;
                Err(PipelineError::TrainingFailed {
                    job: done.id,
                    diagnostics: done.diagnostics.unwrap_or_else(|| "no diagnostics".into()),
                })
            }
        }
    }

    fn stage_finetune(&mut self) -> Result<Vec<Event>, PipelineError> {
        let dataset = self
            .state
            .datasets
            .get("final")
            .cloned()
            .ok_or_else(|| PipelineError::State("final dataset not assembled".into()))?;
        let examples = self.store.read_dataset(&dataset)?;
        let (_, events) = self.train("policy", &dataset.path, &examples)?;
        Ok(events)
    }

    fn stage_evaluate(&mut self) -> Result<Vec<Event>, PipelineError> {
        let backend_ref = self
            .state
            .jobs
            .get("policy")
            .and_then(|j| j.resulting_backend_ref.clone())
            .ok_or_else(|| PipelineError::State("no fine-tuned backend".into()))?;
        let backend = self.ctx.registry.model(&backend_ref)?;
        let test: Vec<TaskId> = self.splits()?.test_ids.iter().copied().collect();
        if test.is_empty() {
            return Err(PipelineError::State("test split is empty".into()));
        }
        let samples = sample_programs(&self.ctx, &self.store, backend.as_ref(), &test, self.state.seeds.sampling, "e")?;
        let report = aggregate(&tallies_of(&samples), &self.ctx.config.ks)?;
        self.state.reports.insert("finetuned".into(), report);
        Ok(vec![Event::Evaluated {
            label: "finetuned".into(),
            backend: backend_ref,
            task_count: test.len(),
        }])
    }

    pub fn audit(&self) -> Result<LineageReport, PipelineError> {
        let examples = match self.state.datasets.get("final") {
            Some(d) => self.store.read_dataset(d)?,
            None => Vec::new(),
        };
        Ok(audit_lineage(&examples, &self.events()?))
    }

    /// Plain-text summary tables of everything the run has measured.
    pub fn report(&self) -> String {
        render_report(&self.state, &self.ctx.config.ks)
    }
}

fn ingested(a: &FeedbackAnnotation) -> Event {
    Event::AnnotationIngested {
        annotation_id: a.id.clone(),
        task_id: a.task_id,
        target_sample_id: a.target_program.id.clone(),
        author: a.author,
    }
}

/// Seeded choice of `k` ids; smaller `k` always yields a prefix of the
/// selection for larger `k`.
pub(crate) fn select_tasks(ids: &[TaskId], k: usize, seed: u64) -> Result<Vec<TaskId>, PipelineError> {
    if k > ids.len() {
        return Err(PipelineError::NotEnoughTasks {
            requested: k,
            available: ids.len(),
        });
    }
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, "task-subsample")));
    order.truncate(k);
    Ok(order)
}

/// Asks the feedback backend about the shortest failing program of each
/// task. Returns the annotations and the tasks that got none.
pub(crate) fn collect_model_feedback(
    ctx: &PipelineContext,
    state: &RunState,
    task_ids: &[TaskId],
) -> Result<(Vec<FeedbackAnnotation>, Vec<TaskId>), PipelineError> {
    let backend_ref = ctx
        .config
        .backends
        .feedback
        .as_ref()
        .ok_or_else(|| PipelineError::Config("backends.feedback is required for model feedback".into()))?;
    let backend = ctx.registry.model(backend_ref)?;
    let fb = &ctx.config.feedback;
    let pool = ctx.pool()?;
    let results: Vec<(TaskId, Option<FeedbackAnnotation>)> = pool.install(|| {
        task_ids
            .par_iter()
            .map(|&id| {
                let Some(target) = state.samples.get(&id).and_then(|s| shortest_failing(s)) else {
                    return Ok((id, None));
                };
                let prompt =
                    build_feedback_elicitation_prompt(&ctx.template, ctx.task(id)?, &target.program_text, fb.shots)?;
                let request = CompletionRequest {
                    prompt,
                    num_samples: 1,
                    temperature: fb.temperature,
                    max_tokens: fb.max_tokens,
                    stop_sequences: ctx.template.stop_sequences(),
                    seed: Some(stream_seed(state.seeds.sampling, &format!("feedback/{id}"))),
                };
                let raw = backend::complete(backend.as_ref(), &request)?;
                let text = match extract_completion_code(&raw[0], &ctx.template, &[]) {
                    Ok(text) => text.trim().to_string(),
                    Err(PromptError::EmptyCompletion) => return Ok((id, None)),
                    Err(e) => return Err(e.into()),
                };
                let annotation = FeedbackAnnotation {
                    id: format!("a{id}"),
                    task_id: id,
                    target_program: target.clone(),
                    feedback_text: text,
                    author: AuthorKind::Model,
                    bug_tags: Vec::new(),
                    bugs_addressed: None,
                    verified_correct: false,
                };
                annotation.validate()?;
                Ok((id, Some(annotation)))
            })
            .collect::<Result<_, PipelineError>>()
    })?;
    let mut annotations = Vec::new();
    let mut pending = Vec::new();
    for (id, a) in results {
        match a {
            Some(a) => annotations.push(a),
            None => pending.push(id),
        }
    }
    Ok((annotations, pending))
}

fn render_report(state: &RunState, ks: &[u64]) -> String {
    let mut out = String::new();
    let row = |label: &str, r: &PassReport| -> Vec<String> {
        let mut cells = vec![label.to_string(), r.task_count.to_string()];
        cells.extend(ks.iter().map(|k| r.pass_at_k.get(k).map_or("-".into(), |v| metrics::percent(*v))));
        cells.push(metrics::percent(r.one_plus_correct));
        cells
    };
    let k_headers: Vec<String> = ks.iter().map(|k| format!("pass@{k}")).collect();
    let mut headers: Vec<&str> = vec!["", "tasks"];
    headers.extend(k_headers.iter().map(String::as_str));
    headers.push("1+ correct");

    let sections: [(&str, &[(&str, &str)]); 3] = [
        ("Base model samples", &[("all split tasks", "sampled")]),
        (
            "Refinements of annotated programs",
            &[("matched feedback", "refine_matched"), ("shuffled feedback", "refine_shuffled")],
        ),
        ("Test split", &[("baseline", "baseline"), ("fine-tuned", "finetuned")]),
    ];
    for (title, rows) in sections {
        let rows: Vec<Vec<String>> = rows
            .iter()
            .filter_map(|(label, key)| state.reports.get(*key).map(|r| row(label, r)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        out.push_str(title);
        out.push('\n');
        out.push_str(&metrics::render_table(&headers, &rows));
        out.push('\n');
    }
    if let Some(splits) = &state.splits {
        let zero = state.zero_correct.values().filter(|z| **z).count();
        out.push_str(&format!(
            "Splits: refine {} / train {} / test {} tasks; {} of {} sampled tasks had no correct sample\n",
            splits.refine_ids.len(),
            splits.train_ids.len(),
            splits.test_ids.len(),
            zero,
            state.zero_correct.len(),
        ));
    }
    let annotations: Vec<FeedbackAnnotation> = state
        .annotations
        .values()
        .chain(state.refiner_annotations.values())
        .map(|r| r.annotation.clone())
        .collect();
    if let Ok(stats) = metrics::feedback_stats(&annotations) {
        out.push_str(&format!(
            "Feedback: {} annotations, {:.1} ± {:.1} words",
            stats.annotation_count, stats.avg_words, stats.words_stddev
        ));
        if let Some(bugs) = stats.avg_bugs_addressed {
            out.push_str(&format!(", {bugs:.2} bugs addressed on average"));
        }
        out.push('\n');
    }
    if !state.pending_tasks.is_empty() {
        out.push_str(&format!("Tasks without feedback: {}\n", state.pending_tasks.len()));
    }
    for (name, d) in &state.datasets {
        out.push_str(&format!("Dataset {name}: {} examples ({})\n", d.count, d.path));
    }
    let used: BTreeSet<&String> = state.jobs.keys().collect();
    for key in used {
        let job = &state.jobs[key];
        out.push_str(&format!(
            "Job {key}: {} {:?}{}\n",
            job.id,
            job.status,
            job.resulting_backend_ref
                .as_ref()
                .map(|b| format!(" -> {b}"))
                .unwrap_or_default()
        ));
    }
    out
}
