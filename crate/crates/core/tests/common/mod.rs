//! Synthetic corpus and scripted backends shared by the integration and
//! acceptance tests.
//!
//! Task `i` asks for `f{i}(x) = x + i`. The base model writes `x - i`
//! (the planted bug) for every refine/train task, so those tasks have no
//! correct sample. The refiner repairs a program only when the prompt
//! carries the feedback written for that same task.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use ilf_core::annotation::{AnnotationRecord, AnnotationService, SubmitRequest, Verdict};
use ilf_core::backend::{MockBackend, MockScript, MockTrainer, MockTrainerOutcome, Registry};
use ilf_core::model::{IdRange, RenderedTask, SplitConfig, Task, TaskId};
use ilf_core::pipeline::{BackendRefs, FeedbackSourceKind, PipelineContext, RunConfig, RunState};
use ilf_core::prompting::RefinePromptTemplate;
use ilf_core::sandbox::SandboxConfig;

pub const REFINE_IDS: [TaskId; 2] = [101, 102];
pub const TRAIN_IDS: [TaskId; 8] = [201, 202, 203, 204, 205, 206, 207, 208];
/// A training-range task the base model already solves.
pub const SOLVED_TRAIN_ID: TaskId = 209;
pub const TEST_IDS: [TaskId; 4] = [301, 302, 303, 304];
pub const SAMPLES: u32 = 10;

pub fn splits() -> SplitConfig {
    SplitConfig {
        refine: IdRange::new(100, 199),
        train: IdRange::new(200, 299),
        test: IdRange::new(300, 399),
    }
}

pub fn task(i: TaskId) -> Task {
    Task::new(
        i,
        format!("Write a function f{i}(x) that returns x plus {i}."),
        vec![
            format!("assert f{i}(0) == {i}"),
            format!("assert f{i}(1) == {}", i + 1),
            format!("assert f{i}(5) == {}", i + 5),
        ],
    )
    .unwrap()
    .with_gold_program(fixed(i))
}

pub fn corpus() -> Vec<Task> {
    let mut ids: Vec<TaskId> = vec![1, 2];
    ids.extend(REFINE_IDS);
    ids.extend(TRAIN_IDS);
    ids.push(SOLVED_TRAIN_ID);
    ids.extend(TEST_IDS);
    ids.into_iter().map(task).collect()
}

pub fn buggy(i: TaskId) -> String {
    format!("def f{i}(x):\n    return x - {i}")
}

pub fn buggy_alt(i: TaskId) -> String {
    format!("def f{i}(x):\n    return (x - {i}) * 1")
}

pub fn fixed(i: TaskId) -> String {
    format!("def f{i}(x):\n    return x + {i}")
}

pub fn feedback(i: TaskId) -> String {
    format!("Use + {i} instead of - {i}.")
}

/// Substring that identifies task `i` in generation, feedback and
/// refinement prompts.
pub fn task_key(i: TaskId) -> String {
    format!("assert f{i}(0) == {i}\n")
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Base model: always buggy on refine/train tasks; one correct sample in
/// three on test tasks.
pub fn policy_script() -> MockScript {
    let mut script = MockScript::always(&["def nothing():\n    return None"]);
    for i in REFINE_IDS.iter().chain(&TRAIN_IDS) {
        let c = [buggy(*i), buggy_alt(*i)];
        script = script.rule(&[&task_key(*i)], &strs(&c));
    }
    script = script.rule(&[&task_key(SOLVED_TRAIN_ID)], &[&fixed(SOLVED_TRAIN_ID)]);
    for i in TEST_IDS {
        let c = [fixed(i), buggy(i), buggy(i)];
        script = script.rule(&[&task_key(i)], &strs(&c));
    }
    script
}

/// Fine-tuned model whose test-split accuracy is `correct` in `of`.
pub fn tuned_script(correct: usize, of: usize) -> MockScript {
    let mut script = MockScript::always(&["def nothing():\n    return None"]);
    for i in TEST_IDS {
        let c: Vec<String> = (0..of).map(|j| if j < correct { fixed(i) } else { buggy(i) }).collect();
        script = script.rule(&[&task_key(i)], &strs(&c));
    }
    script
}

/// Repairs half of its samples when the prompt holds the task's own
/// feedback; otherwise returns the program unchanged in spirit (buggy).
pub fn refiner_script() -> MockScript {
    let mut script = MockScript::always(&["def broken(x):\n    return None"]);
    for i in REFINE_IDS.iter().chain(&TRAIN_IDS) {
        let fb = format!("### Feedback\n{}\n", feedback(*i));
        let c = [fixed(*i), buggy(*i)];
        script = script.rule(&[&task_key(*i), &fb], &strs(&c));
    }
    script
}

pub fn critic_script() -> MockScript {
    let mut script = MockScript::default();
    for i in REFINE_IDS.iter().chain(&TRAIN_IDS) {
        script = script.rule(&[&task_key(*i)], &[&feedback(*i)]);
    }
    script
}

pub fn registry(trainer: MockTrainer) -> Registry {
    Registry::new()
        .with_model(Arc::new(MockBackend::new("base", policy_script())))
        .with_model(Arc::new(MockBackend::new("tuned", tuned_script(2, 3))))
        .with_model(Arc::new(MockBackend::new("refiner", refiner_script())))
        .with_model(Arc::new(MockBackend::new("critic", critic_script())))
        .with_trainer(Arc::new(trainer))
}

pub fn config(export: Option<&Path>) -> RunConfig {
    let mut config = RunConfig::new(
        "synthetic.jsonl",
        BackendRefs {
            policy: "base".into(),
            refiner: "refiner".into(),
            feedback: Some("critic".into()),
            trainer: "trainer".into(),
        },
    );
    config.samples_per_task = SAMPLES;
    config.parallelism = 4;
    config.splits = splits();
    config.sandbox = SandboxConfig::default().with_timeout(Duration::from_secs(5));
    config.trainer_poll_interval_ms = 1;
    config.trainer_timeout_secs = 10;
    match export {
        Some(path) => {
            config.feedback.source = FeedbackSourceKind::Human;
            config.feedback.export = Some(path.to_path_buf());
        }
        None => config.feedback.source = FeedbackSourceKind::Model,
    }
    config.feedback.shots = 0;
    config
}

pub fn context(config: RunConfig, trainer: MockTrainer) -> PipelineContext {
    PipelineContext::new(config, corpus(), registry(trainer), RefinePromptTemplate::default()).unwrap()
}

pub fn default_trainer() -> MockTrainer {
    MockTrainer::new("trainer", "tuned")
}

/// Trainer whose resulting model improves with dataset size.
pub fn scaling_trainer() -> MockTrainer {
    MockTrainer {
        outcomes: [(0, "tuned-0"), (2, "tuned-2"), (4, "tuned-4"), (8, "tuned-8")]
            .into_iter()
            .map(|(min_examples, backend_ref)| MockTrainerOutcome {
                min_examples,
                backend_ref: backend_ref.into(),
            })
            .collect(),
        ..MockTrainer::new("trainer", "unused")
    }
}

pub fn scaling_registry() -> Registry {
    let mut registry = registry(scaling_trainer());
    for (name, correct) in [("tuned-0", 0), ("tuned-2", 1), ("tuned-4", 2), ("tuned-8", 4)] {
        registry = registry.with_model(Arc::new(MockBackend::new(name, tuned_script(correct, 5))));
    }
    registry
}

/// Drives the annotation service for every queued task: claim, submit the
/// task's feedback and minimal fix for the first failing program, verify.
pub fn annotate_via_service(state: &RunState, rendered: &BTreeMap<TaskId, RenderedTask>) -> Vec<AnnotationRecord> {
    let service = AnnotationService::from_pool(
        rendered,
        &state.annotation_pool(),
        SandboxConfig::default().with_timeout(Duration::from_secs(5)),
    )
    .unwrap();
    while let Some(item) = service.next_item("annotator").unwrap() {
        let i = item.task_id();
        let index = item
            .failing_programs
            .iter()
            .position(|p| p.program_text == buggy(i))
            .expect("buggy sample queued");
        let receipt = service
            .submit(
                "annotator",
                i,
                &SubmitRequest {
                    program_index: index,
                    feedback_text: feedback(i),
                    refinement_text: fixed(i),
                    bug_tags: vec!["algebra".into()],
                    bugs_addressed: Some(1),
                },
            )
            .unwrap();
        assert!(receipt.eval.passed, "fix for task {i} should pass");
        assert_eq!(service.review(i, true).unwrap(), Verdict::Accept);
    }
    service.export_accepted()
}

pub fn write_export(path: &Path, records: &[AnnotationRecord]) {
    let file = std::fs::File::create(path).unwrap();
    ilf_core::annotation::write_records(file, records).unwrap();
}
