use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::state::Event;
use super::{ExampleKind, FineTuneExample};
use crate::model::{Split, SplitAssignment};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageReport {
    pub final_examples: usize,
    /// Examples traced to a failing original, its feedback and a passing
    /// refinement.
    pub traced: usize,
    pub violations: Vec<String>,
}

impl LineageReport {
    pub fn is_complete(&self) -> bool {
        self.violations.is_empty() && self.traced == self.final_examples
    }
}

/// Walks every final-training example back through the event log:
/// example -> passing refinement -> annotation -> failing original sample.
pub fn audit_lineage(examples: &[FineTuneExample], events: &[Event]) -> LineageReport {
    let mut sampled = HashMap::new();
    let mut ingested = HashMap::new();
    let mut refined = HashMap::new();
    let mut assembled = HashMap::new();
    for e in events {
        match e {
            Event::Sampled { sample_id, passed, .. } => {
                sampled.insert(sample_id.as_str(), *passed);
            }
            Event::AnnotationIngested {
                annotation_id,
                target_sample_id,
                ..
            } => {
                ingested.insert(annotation_id.as_str(), target_sample_id.as_str());
            }
            Event::Refined {
                sample_id,
                annotation_id,
                passed,
                ..
            } => {
                refined.insert(sample_id.as_str(), (annotation_id.as_str(), *passed));
            }
            Event::ExampleAssembled {
                example_id,
                annotation_id,
                source_sample_id,
                ..
            } => {
                assembled.insert(example_id.as_str(), (annotation_id.as_str(), source_sample_id.as_deref()));
            }
            _ => {}
        }
    }

    let mut report = LineageReport {
        final_examples: 0,
        traced: 0,
        violations: Vec::new(),
    };
    for ex in examples.iter().filter(|e| e.kind == ExampleKind::FinalTraining) {
        report.final_examples += 1;
        match trace(ex, &sampled, &ingested, &refined, &assembled) {
            Ok(()) => report.traced += 1,
            Err(v) => report.violations.push(format!("{}: {v}", ex.id)),
        }
    }
    report
}

fn trace(
    ex: &FineTuneExample,
    sampled: &HashMap<&str, bool>,
    ingested: &HashMap<&str, &str>,
    refined: &HashMap<&str, (&str, bool)>,
    assembled: &HashMap<&str, (&str, Option<&str>)>,
) -> Result<(), String> {
    let source = ex.source_sample_id.as_deref().ok_or("no source sample")?;
    let &(annotation, logged_source) = assembled.get(ex.id.as_str()).ok_or("no assembly event")?;
    if logged_source != Some(source) {
        return Err(format!("assembly event names source {logged_source:?}, example names {source}"));
    }
    let &(refined_from, passed) = refined.get(source).ok_or_else(|| format!("refinement {source} not logged"))?;
    if !passed {
        return Err(format!("refinement {source} did not pass"));
    }
    if refined_from != annotation {
        return Err(format!("refinement {source} came from {refined_from}, not {annotation}"));
    }
    let original = ingested
        .get(annotation)
        .ok_or_else(|| format!("annotation {annotation} not ingested"))?;
    match sampled.get(original) {
        Some(false) => Ok(()),
        Some(true) => Err(format!("original {original} passed its tests")),
        None => Err(format!("original {original} not logged")),
    }
}

/// Final-training examples must come from the train split, refiner examples
/// from the refine split, and nothing from the test split.
pub fn check_split_hygiene<'a>(
    splits: &SplitAssignment,
    examples: impl IntoIterator<Item = &'a FineTuneExample>,
) -> Vec<String> {
    let mut violations = Vec::new();
    for ex in examples {
        let expected = match ex.kind {
            ExampleKind::FinalTraining => Split::Train,
            ExampleKind::RefinerTraining => Split::Refine,
        };
        let found = splits.split_of(ex.task_id);
        if found != Some(expected) {
            violations.push(format!(
                "example {} (task {}) is {:?}, expected {expected:?}",
                ex.id, ex.task_id, found
            ));
        }
    }
    violations
}
