//! Prompt construction for generation, refinement and feedback elicitation.
//!
//! A filled refinement instance is four sections, each a marker line followed
//! by its content:
//!
//! ```text
//! ### Task
//! <description and embedded test>
//! ### Old Code
//! <incorrect program>
//! ### Feedback
//! <natural-language feedback>
//! ### New Code
//! <refined program>
//! ```
//!
//! Few-shot prompts are complete instances separated by a blank line, then
//! the query instance filled up to the section the model should write. The
//! default markers are a reconstruction; load a different template file to
//! change them. Inputs that contain a marker are rejected so that every
//! prompt parses back unambiguously.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotationRecord;
use crate::model::{RenderedTask, TaskId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("markers must be non-empty, distinct, and not contain one another")]
    InvalidMarkers,
    #[error("{field} contains the section marker `{marker}`")]
    MarkerInInput { field: &'static str, marker: String },
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("requested {requested} shots but only {available} exemplars are available")]
    TooManyShots { requested: usize, available: usize },
    #[error("completion is empty after truncation")]
    EmptyCompletion,
    #[error("prompt does not parse: {0}")]
    Unparseable(String),
    #[error("template file: {0}")]
    TemplateFile(String),
    #[error("no rendered task {0} for exemplar")]
    UnknownTask(TaskId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub task: String,
    pub old_code: String,
    pub feedback: String,
    pub new_code: String,
}

impl Default for Markers {
    fn default() -> Self {
        Markers {
            task: "### Task".into(),
            old_code: "### Old Code".into(),
            feedback: "### Feedback".into(),
            new_code: "### New Code".into(),
        }
    }
}

impl Markers {
    fn all(&self) -> [&str; 4] {
        [&self.task, &self.old_code, &self.feedback, &self.new_code]
    }

    fn validate(&self) -> Result<(), PromptError> {
        let all = self.all();
        for (i, a) in all.iter().enumerate() {
            if a.is_empty() || a.contains('\n') {
                return Err(PromptError::InvalidMarkers);
            }
            for (j, b) in all.iter().enumerate() {
                if i != j && b.contains(a) {
                    return Err(PromptError::InvalidMarkers);
                }
            }
        }
        Ok(())
    }
}

/// One complete (task, old code, feedback, new code) example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub task_text: String,
    pub old_code: String,
    pub feedback: String,
    pub new_code: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinePromptTemplate {
    markers: Markers,
    exemplars: Vec<Exemplar>,
}

const PLACEHOLDERS: [&str; 4] = ["{task}", "{old_code}", "{feedback}", "{new_code}"];

impl RefinePromptTemplate {
    pub fn new(markers: Markers, exemplars: Vec<Exemplar>) -> Result<Self, PromptError> {
        markers.validate()?;
        let template = RefinePromptTemplate {
            markers,
            exemplars: Vec::new(),
        };
        template.with_exemplars(exemplars)
    }

    pub fn with_exemplars(mut self, exemplars: Vec<Exemplar>) -> Result<Self, PromptError> {
        for ex in &exemplars {
            self.check("exemplar task", &ex.task_text)?;
            self.check("exemplar old code", &ex.old_code)?;
            self.check("exemplar feedback", &ex.feedback)?;
            self.check("exemplar new code", &ex.new_code)?;
        }
        self.exemplars = exemplars;
        Ok(self)
    }

    pub fn markers(&self) -> &Markers {
        &self.markers
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    /// Parses a plain-text template where each placeholder line
    /// (`{task}`, `{old_code}`, `{feedback}`, `{new_code}`) is preceded by
    /// its marker line.
    pub fn from_template_text(text: &str) -> Result<Self, PromptError> {
        let lines: Vec<&str> = text.lines().collect();
        let mut found = Vec::with_capacity(4);
        for placeholder in PLACEHOLDERS {
            let idx = lines
                .iter()
                .position(|l| l.trim() == placeholder)
                .ok_or_else(|| PromptError::TemplateFile(format!("missing {placeholder}")))?;
            if idx == 0 {
                return Err(PromptError::TemplateFile(format!("{placeholder} has no marker line")));
            }
            found.push((idx, lines[idx - 1].to_string()));
        }
        if !found.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(PromptError::TemplateFile("placeholders out of order".into()));
        }
        let mut markers = found.into_iter().map(|(_, m)| m);
        let markers = Markers {
            task: markers.next().unwrap_or_default(),
            old_code: markers.next().unwrap_or_default(),
            feedback: markers.next().unwrap_or_default(),
            new_code: markers.next().unwrap_or_default(),
        };
        RefinePromptTemplate::new(markers, Vec::new())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::TemplateFile(format!("{}: {e}", path.display())))?;
        Self::from_template_text(&text)
    }

    pub fn to_template_text(&self) -> String {
        self.markers
            .all()
            .iter()
            .zip(PLACEHOLDERS)
            .map(|(m, p)| format!("{m}\n{p}\n"))
            .collect()
    }

    /// Stop sequences for refinement and feedback completions.
    pub fn stop_sequences(&self) -> Vec<String> {
        self.markers.all().iter().map(|m| m.to_string()).collect()
    }

    fn check(&self, field: &'static str, value: &str) -> Result<(), PromptError> {
        match self.markers.all().into_iter().find(|m| value.contains(m)) {
            Some(marker) => Err(PromptError::MarkerInInput {
                field,
                marker: marker.to_string(),
            }),
            None => Ok(()),
        }
    }

    fn push_section(&self, out: &mut String, marker: &str, content: &str) {
        out.push_str(marker);
        out.push('\n');
        out.push_str(content);
        out.push('\n');
    }

    fn push_exemplars(&self, out: &mut String, shots: usize) -> Result<(), PromptError> {
        if shots > self.exemplars.len() {
            return Err(PromptError::TooManyShots {
                requested: shots,
                available: self.exemplars.len(),
            });
        }
        for ex in &self.exemplars[..shots] {
            self.push_section(out, &self.markers.task, &ex.task_text);
            self.push_section(out, &self.markers.old_code, &ex.old_code);
            self.push_section(out, &self.markers.feedback, &ex.feedback);
            self.push_section(out, &self.markers.new_code, &ex.new_code);
            out.push('\n');
        }
        Ok(())
    }

    /// Fills a complete instance (used for refiner training targets'
    /// counterpart and exemplar blocks).
    pub fn fill_instance(&self, ex: &Exemplar) -> Result<String, PromptError> {
        let template = self.clone().with_exemplars(vec![ex.clone()])?;
        let mut out = String::new();
        template.push_exemplars(&mut out, 1)?;
        out.pop();
        Ok(out)
    }

    /// Parses any prompt produced by this template.
    pub fn parse(&self, text: &str) -> Result<ParsedPrompt, PromptError> {
        let sections = self.split_sections(text)?;
        let m = &self.markers;
        let order = [&m.task, &m.old_code, &m.feedback, &m.new_code];
        let mut exemplars = Vec::new();
        let mut i = 0;
        while sections.len() - i > 4 || (sections.len() - i == 4 && !sections[i + 3].1.is_empty()) {
            let chunk = &sections[i..i + 4];
            for (slot, (marker, _)) in chunk.iter().enumerate() {
                if *marker != order[slot].as_str() {
                    return Err(PromptError::Unparseable(format!("expected `{}`", order[slot])));
                }
            }
            let next_is_instance = i + 4 < sections.len();
            let mut new_code = chunk[3].1.to_string();
            if next_is_instance {
                new_code = new_code
                    .strip_suffix('\n')
                    .ok_or_else(|| PromptError::Unparseable("missing instance separator".into()))?
                    .to_string();
            }
            exemplars.push(Exemplar {
                task_text: chunk[0].1.to_string(),
                old_code: chunk[1].1.to_string(),
                feedback: chunk[2].1.to_string(),
                new_code,
            });
            i += 4;
        }
        let rest = &sections[i..];
        let query = match rest.len() {
            0 => None,
            3 | 4 => {
                for (slot, (marker, _)) in rest.iter().enumerate() {
                    if *marker != order[slot].as_str() {
                        return Err(PromptError::Unparseable(format!("expected `{}`", order[slot])));
                    }
                }
                let open = rest.last().map(|s| s.1).unwrap_or_default();
                if !open.is_empty() {
                    return Err(PromptError::Unparseable("query does not end at a marker".into()));
                }
                Some(QueryInstance {
                    task_text: rest[0].1.to_string(),
                    old_code: rest[1].1.to_string(),
                    feedback: (rest.len() == 4).then(|| rest[2].1.to_string()),
                })
            }
            n => return Err(PromptError::Unparseable(format!("{n} trailing sections"))),
        };
        Ok(ParsedPrompt { exemplars, query })
    }

    /// Splits text into (marker, content) pairs. Content excludes the line
    /// break after the marker and the terminating line break of the section.
    fn split_sections<'a>(&'a self, text: &'a str) -> Result<Vec<(&'a str, &'a str)>, PromptError> {
        let mut headers: Vec<(usize, &str)> = self
            .markers
            .all()
            .into_iter()
            .flat_map(|m| text.match_indices(m).map(move |(pos, _)| (pos, m)))
            .collect();
        headers.sort_by_key(|(pos, _)| *pos);
        if headers.first().map(|h| h.0) != Some(0) {
            return Err(PromptError::Unparseable("text does not start with a marker".into()));
        }
        let mut sections = Vec::with_capacity(headers.len());
        for (k, &(pos, marker)) in headers.iter().enumerate() {
            let body_start = pos + marker.len();
            let body = text[body_start..]
                .strip_prefix('\n')
                .ok_or_else(|| PromptError::Unparseable(format!("`{marker}` not followed by a newline")))?;
            let body_start = text.len() - body.len();
            let end = headers.get(k + 1).map_or(text.len(), |h| h.0);
            let content = &text[body_start..end.max(body_start)];
            let content = if k + 1 < headers.len() {
                content
                    .strip_suffix('\n')
                    .ok_or_else(|| PromptError::Unparseable("section not newline-terminated".into()))?
            } else {
                content
            };
            sections.push((marker, content));
        }
        Ok(sections)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryInstance {
    pub task_text: String,
    pub old_code: String,
    /// Absent for feedback-elicitation prompts.
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub exemplars: Vec<Exemplar>,
    pub query: Option<QueryInstance>,
}

/// Stop sequences for base-model sampling: the program ends where test or
/// driver code would begin.
pub const GENERATION_STOPS: [&str; 4] = ["\n\"\"\"", "\nassert ", "\nprint(", "\nif __name__"];

pub fn build_generation_prompt(task: &RenderedTask) -> String {
    task.prompt_text.clone()
}

/// Few-shot exemplars, then the query filled through its feedback section,
/// ending at the new-code marker.
pub fn build_refine_prompt(
    template: &RefinePromptTemplate,
    task: &RenderedTask,
    program: &str,
    feedback: &str,
    shots: usize,
) -> Result<String, PromptError> {
    if program.trim().is_empty() {
        return Err(PromptError::EmptyInput("program"));
    }
    if feedback.trim().is_empty() {
        return Err(PromptError::EmptyInput("feedback"));
    }
    let task_text = task.task_text();
    template.check("task", &task_text)?;
    template.check("program", program)?;
    template.check("feedback", feedback)?;
    let mut out = String::new();
    template.push_exemplars(&mut out, shots)?;
    let m = &template.markers;
    template.push_section(&mut out, &m.task, &task_text);
    template.push_section(&mut out, &m.old_code, program);
    template.push_section(&mut out, &m.feedback, feedback);
    out.push_str(&m.new_code);
    out.push('\n');
    Ok(out)
}

/// Like [`build_refine_prompt`] but ends at the feedback marker.
pub fn build_feedback_elicitation_prompt(
    template: &RefinePromptTemplate,
    task: &RenderedTask,
    program: &str,
    shots: usize,
) -> Result<String, PromptError> {
    if program.trim().is_empty() {
        return Err(PromptError::EmptyInput("program"));
    }
    let task_text = task.task_text();
    template.check("task", &task_text)?;
    template.check("program", program)?;
    let mut out = String::new();
    template.push_exemplars(&mut out, shots)?;
    let m = &template.markers;
    template.push_section(&mut out, &m.task, &task_text);
    template.push_section(&mut out, &m.old_code, program);
    out.push_str(&m.feedback);
    out.push('\n');
    Ok(out)
}

/// Truncates a raw completion at the first section marker or stop sequence
/// and strips trailing whitespace.
pub fn extract_completion_code(
    raw_completion: &str,
    template: &RefinePromptTemplate,
    extra_stops: &[String],
) -> Result<String, PromptError> {
    let cut = template
        .markers
        .all()
        .into_iter()
        .chain(extra_stops.iter().map(String::as_str))
        .filter(|s| !s.is_empty())
        .filter_map(|s| raw_completion.find(s))
        .min()
        .unwrap_or(raw_completion.len());
    let code = raw_completion[..cut].trim_end();
    if code.trim().is_empty() {
        return Err(PromptError::EmptyCompletion);
    }
    Ok(code.to_string())
}

/// Builds exemplars from annotation records that carry a refinement.
pub fn exemplars_from_records(
    records: &[AnnotationRecord],
    tasks: &BTreeMap<TaskId, RenderedTask>,
) -> Result<Vec<Exemplar>, PromptError> {
    records
        .iter()
        .filter_map(|r| r.refinement.as_ref().map(|refinement| (r, refinement)))
        .map(|(r, refinement)| {
            let task = tasks
                .get(&r.annotation.task_id)
                .ok_or(PromptError::UnknownTask(r.annotation.task_id))?;
            Ok(Exemplar {
                task_text: task.task_text(),
                old_code: r.annotation.target_program.program_text.clone(),
                feedback: r.annotation.feedback_text.clone(),
                new_code: refinement.refinement_text.clone(),
            })
        })
        .collect()
}
