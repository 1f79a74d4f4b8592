//! Feedback annotations, the acceptance filter and the annotation queue.

mod queue;

pub(crate) use queue::write_atomic;
pub use queue::{
    edit_distance_query, AnnotationService, ItemStatus, ItemView, QueueItem, QueueSnapshot, SubmissionReceipt,
    SubmitRequest,
};

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProgramSample, TaskId};
use crate::sandbox::{EvalOutcome, SandboxError};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{0} must be non-empty")]
    Empty(&'static str),
    #[error("annotation {0} targets a program that is not recorded as failing")]
    TargetNotFailing(String),
    #[error("refinement for annotation {0} has no evaluation outcome")]
    MissingEval(String),
    #[error("annotation {0} has no refinement")]
    MissingRefinement(String),
    #[error("refinement references annotation {found}, expected {expected}")]
    MismatchedRef { expected: String, found: String },
    #[error("need at least two annotations from two tasks to derange feedback, got {0}")]
    CannotDerange(usize),
    #[error("unknown queue item {0}")]
    UnknownItem(String),
    #[error("queue item {item} is claimed by {holder}")]
    Conflict { item: String, holder: String },
    #[error("queue item {item} is {status}; cannot {action}")]
    InvalidState {
        item: String,
        status: String,
        action: &'static str,
    },
    #[error("program index {index} out of range for item {item}")]
    NoSuchProgram { item: String, index: usize },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("annotation records: {0}")]
    Records(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthorKind {
    Human,
    Model,
}

/// Natural-language feedback on one failing program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAnnotation {
    pub id: String,
    pub task_id: TaskId,
    pub target_program: ProgramSample,
    pub feedback_text: String,
    pub author: AuthorKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bug_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bugs_addressed: Option<u32>,
    #[serde(default)]
    pub verified_correct: bool,
}

impl FeedbackAnnotation {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.feedback_text.trim().is_empty() {
            return Err(AnnotationError::Empty("feedback_text"));
        }
        if self.target_program.passed() != Some(false) || self.target_program.task_id != self.task_id {
            return Err(AnnotationError::TargetNotFailing(self.id.clone()));
        }
        Ok(())
    }
}

/// A human-written repair of the annotated program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSubmission {
    pub annotation_ref: String,
    pub refinement_text: String,
    pub edit_distance: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalOutcome>,
}

impl RefinementSubmission {
    pub fn new(annotation: &FeedbackAnnotation, refinement_text: impl Into<String>) -> Self {
        let refinement_text = refinement_text.into();
        RefinementSubmission {
            annotation_ref: annotation.id.clone(),
            edit_distance: levenshtein(&refinement_text, &annotation.target_program.program_text),
            refinement_text,
            eval: None,
        }
    }
}

/// Wall-clock bookkeeping from the annotation queue, in seconds since the
/// Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTiming {
    pub claimed_at: f64,
    pub submitted_at: f64,
}

impl AnnotationTiming {
    pub fn seconds_spent(&self) -> f64 {
        self.submitted_at - self.claimed_at
    }
}

/// Exchange format between the annotation service, prompting (exemplar
/// files) and the pipeline: one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotation: FeedbackAnnotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementSubmission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<AnnotationTiming>,
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| AnnotationError::Records(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut writer: W, records: &[AnnotationRecord]) -> Result<(), AnnotationError> {
    for record in records {
        serde_json::to_writer(&mut writer, record).map_err(|e| AnnotationError::Records(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Unit-cost insert/delete/substitute distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(a, b) / max(len a, len b)`, or 0 for two empty strings.
pub fn edit_distance_ratio(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / longest as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    TestsFailed,
    Unverified,
    TooManyEdits { distance: usize, max_len: usize },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::TestsFailed => write!(f, "the refinement does not pass all tests"),
            RejectReason::Unverified => write!(f, "the feedback has not been verified as correct"),
            RejectReason::TooManyEdits { distance, max_len } => write!(
                f,
                "edit distance {distance} is not below half the longer program length ({max_len} chars)"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Checks, in order: the refinement passes every test, the feedback is
/// verified, and the edit distance is strictly below half the longer of the
/// two programs (in characters). The distance is recomputed from the texts.
pub fn accept_annotation(
    annotation: &FeedbackAnnotation,
    submission: &RefinementSubmission,
) -> Result<Verdict, AnnotationError> {
    if submission.annotation_ref != annotation.id {
        return Err(AnnotationError::MismatchedRef {
            expected: annotation.id.clone(),
            found: submission.annotation_ref.clone(),
        });
    }
    let eval = submission
        .eval
        .as_ref()
        .ok_or_else(|| AnnotationError::MissingEval(annotation.id.clone()))?;
    if !eval.passed {
        return Ok(Verdict::Reject(RejectReason::TestsFailed));
    }
    if !annotation.verified_correct {
        return Ok(Verdict::Reject(RejectReason::Unverified));
    }
    let original = &annotation.target_program.program_text;
    let refinement = &submission.refinement_text;
    let distance = levenshtein(refinement, original);
    let max_len = refinement.chars().count().max(original.chars().count());
    if 2 * distance >= max_len {
        return Ok(Verdict::Reject(RejectReason::TooManyEdits { distance, max_len }));
    }
    Ok(Verdict::Accept)
}

/// Convenience over [`accept_annotation`] for an exported record.
pub fn accept_record(record: &AnnotationRecord) -> Result<Verdict, AnnotationError> {
    let submission = record
        .refinement
        .as_ref()
        .ok_or_else(|| AnnotationError::MissingRefinement(record.annotation.id.clone()))?;
    accept_annotation(&record.annotation, submission)
}

/// Reassigns feedback texts so that no annotation keeps feedback written for
/// its own task. The multiset of texts is preserved and the permutation is a
/// pure function of the input order and `seed`.
pub fn shuffle_feedback(
    annotations: &[FeedbackAnnotation],
    seed: u64,
) -> Result<Vec<FeedbackAnnotation>, AnnotationError> {
    let n = annotations.len();
    let perm = derangement_by_task(annotations, seed).ok_or(AnnotationError::CannotDerange(n))?;
    Ok(annotations
        .iter()
        .zip(&perm)
        .map(|(a, &src)| FeedbackAnnotation {
            id: format!("{}-shuffled", a.id),
            feedback_text: annotations[src].feedback_text.clone(),
            ..a.clone()
        })
        .collect())
}

fn derangement_by_task(annotations: &[FeedbackAnnotation], seed: u64) -> Option<Vec<usize>> {
    let n = annotations.len();
    if n < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let valid = |perm: &[usize]| {
        perm.iter()
            .enumerate()
            .all(|(i, &j)| annotations[i].task_id != annotations[j].task_id)
    };
    // Uniform shuffles are a derangement with probability about 1/e when
    // tasks are distinct, so a bounded number of attempts is plenty.
    for _ in 0..10_000 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        if valid(&perm) {
            return Some(perm);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProgramOrigin, SamplingInfo};
    use crate::sandbox::FailureKind;
    use proptest::prelude::*;
    use std::time::Duration;

    /// Textbook full-matrix recurrence.
    fn oracle_distance(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        d[0] = (0..=b.len()).collect();
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    pub(crate) fn failing(task_id: TaskId, text: &str) -> ProgramSample {
        let mut s = ProgramSample::new(
            format!("t{task_id}-s0"),
            task_id,
            text,
            ProgramOrigin::BaseModel,
            "m",
            SamplingInfo {
                temperature: 0.8,
                index: 0,
            },
        )
        .unwrap();
        s.eval = Some(outcome(false));
        s
    }

    fn outcome(passed: bool) -> EvalOutcome {
        EvalOutcome {
            passed,
            failure_kind: (!passed).then_some(FailureKind::AssertionFailure),
            duration: Duration::ZERO,
            per_test: vec![],
        }
    }

    fn annotation(task_id: TaskId, original: &str, verified: bool) -> FeedbackAnnotation {
        FeedbackAnnotation {
            id: format!("a{task_id}"),
            task_id,
            target_program: failing(task_id, original),
            feedback_text: format!("feedback for {task_id}"),
            author: AuthorKind::Human,
            bug_tags: vec![],
            bugs_addressed: None,
            verified_correct: verified,
        }
    }

    fn submission(a: &FeedbackAnnotation, refinement: &str, passed: bool) -> RefinementSubmission {
        RefinementSubmission {
            eval: Some(outcome(passed)),
            ..RefinementSubmission::new(a, refinement)
        }
    }

    #[test]
    fn known_distances() {
        assert_eq!(levenshtein("kitten", "sitting"), oracle_distance("kitten", "sitting"));
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("naïve", "naive"), 1);
        assert_eq!(edit_distance_ratio("", ""), 0.0);
        assert_eq!(edit_distance_ratio("abcd", "abcd"), 0.0);
        assert_eq!(edit_distance_ratio("ab", "cd"), 1.0);
    }

    #[test]
    fn acceptance_boundary_is_strict() {
        let a = annotation(1, "abcdefghij", true);
        let five = submission(&a, "abcdeFGHIJ", true);
        assert_eq!(five.edit_distance, 5);
        assert_eq!(
            accept_annotation(&a, &five).unwrap(),
            Verdict::Reject(RejectReason::TooManyEdits { distance: 5, max_len: 10 })
        );
        let four = submission(&a, "abcdefGHIJ", true);
        assert_eq!(accept_annotation(&a, &four).unwrap(), Verdict::Accept);
    }

    #[test]
    fn rejection_order() {
        let unverified = annotation(1, "abcdefghij", false);
        let s = submission(&unverified, "abcdefghiJ", true);
        assert_eq!(accept_annotation(&unverified, &s).unwrap(), Verdict::Reject(RejectReason::Unverified));
        let s = submission(&unverified, "zzzzzzzzzz", false);
        assert_eq!(accept_annotation(&unverified, &s).unwrap(), Verdict::Reject(RejectReason::TestsFailed));
        let mut missing = s.clone();
        missing.eval = None;
        assert!(matches!(accept_annotation(&unverified, &missing), Err(AnnotationError::MissingEval(_))));
        missing.annotation_ref = "other".into();
        assert!(matches!(accept_annotation(&unverified, &missing), Err(AnnotationError::MismatchedRef { .. })));
    }

    #[test]
    fn annotation_validation() {
        let mut a = annotation(3, "x = 1", true);
        assert!(a.validate().is_ok());
        a.target_program.eval = Some(outcome(true));
        assert!(matches!(a.validate(), Err(AnnotationError::TargetNotFailing(_))));
        a.target_program.eval = None;
        assert!(a.validate().is_err());
        let mut b = annotation(3, "x = 1", true);
        b.feedback_text = "  ".into();
        assert!(matches!(b.validate(), Err(AnnotationError::Empty(_))));
    }

    #[test]
    fn records_round_trip() {
        let a = annotation(4, "def f(): return 1", true);
        let record = AnnotationRecord {
            refinement: Some(submission(&a, "def f(): return 2", true)),
            annotation: a,
            timing: Some(AnnotationTiming {
                claimed_at: 10.0,
                submitted_at: 70.5,
            }),
        };
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&record)).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), vec![record.clone()]);
        assert_eq!(record.timing.unwrap().seconds_spent(), 60.5);
        assert!(read_records("{bad".as_bytes()).is_err());
    }

    #[test]
    fn two_items_are_swapped() {
        let anns = vec![annotation(1, "x", true), annotation(2, "y", true)];
        let out = shuffle_feedback(&anns, 3).unwrap();
        assert_eq!(out[0].feedback_text, anns[1].feedback_text);
        assert_eq!(out[1].feedback_text, anns[0].feedback_text);
        assert_eq!(out[0].task_id, 1);
        assert!(shuffle_feedback(&anns[..1], 3).is_err());
        let same_task = vec![annotation(1, "x", true), annotation(1, "y", true)];
        assert!(matches!(shuffle_feedback(&same_task, 0), Err(AnnotationError::CannotDerange(2))));
    }

    proptest! {
        #[test]
        fn metric_axioms(a in "[ab\\n ]{0,12}", b in "[abc]{0,12}", c in "[ac ]{0,12}") {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, oracle_distance(&a, &b));
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        }

        #[test]
        fn derangement_properties(n in 2usize..40, seed in any::<u64>()) {
            let anns: Vec<FeedbackAnnotation> =
                (0..n as u32).map(|i| annotation(i + 1, "x = 0", true)).collect();
            let out = shuffle_feedback(&anns, seed).unwrap();
            prop_assert_eq!(&out, &shuffle_feedback(&anns, seed).unwrap());
            for (orig, shuffled) in anns.iter().zip(&out) {
                prop_assert_ne!(&orig.feedback_text, &shuffled.feedback_text);
                prop_assert_eq!(orig.task_id, shuffled.task_id);
            }
            let mut before: Vec<_> = anns.iter().map(|a| a.feedback_text.clone()).collect();
            let mut after: Vec<_> = out.iter().map(|a| a.feedback_text.clone()).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
        }
    }
}
