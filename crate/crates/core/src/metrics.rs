//! pass@k, aggregate reports, perplexity and feedback statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::FeedbackAnnotation;
use crate::backend::{self, BackendError, ModelBackend, ScoringRequest};
use crate::model::TaskId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid pass@k arguments n={n} c={c} k={k}")]
    InvalidPassAtK { n: u64, c: u64, k: u64 },
    #[error("no tasks to aggregate")]
    Empty,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Unbiased pass@k for one task with `n` samples of which `c` are correct:
/// one minus the probability that a uniformly drawn `k`-subset holds no
/// correct sample.
///
/// Uses exact integer binomials while they stay below 2^53, so small cases
/// match a subset-enumeration count to the last bit. Larger cases use the
/// telescoped product `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, MetricsError> {
    if k == 0 || k > n || c > n {
        return Err(MetricsError::InvalidPassAtK { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    const EXACT_LIMIT: u128 = 1 << 53;
    if let (Some(all), Some(none)) = (binomial(n, k), binomial(n - c, k)) {
        if all < EXACT_LIMIT {
            return Ok((all - none) as f64 / all as f64);
        }
    }
    let survive: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - survive)
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Per-task sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTally {
    pub task_id: TaskId,
    pub n: u64,
    pub c: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub task_count: usize,
    /// Mean pass@k over tasks, keyed by k.
    pub pass_at_k: BTreeMap<u64, f64>,
    /// Fraction of tasks with at least one correct sample.
    pub one_plus_correct: f64,
    pub task_ids: Vec<TaskId>,
}

pub fn aggregate(tallies: &[TaskTally], ks: &[u64]) -> Result<PassReport, MetricsError> {
    if tallies.is_empty() {
        return Err(MetricsError::Empty);
    }
    let count = tallies.len() as f64;
    let mut per_k = BTreeMap::new();
    for &k in ks {
        let mut sum = 0.0;
        for t in tallies {
            sum += pass_at_k(t.n, t.c, k)?;
        }
        per_k.insert(k, sum / count);
    }
    let solved = tallies.iter().filter(|t| t.c > 0).count() as f64;
    let mut task_ids: Vec<TaskId> = tallies.iter().map(|t| t.task_id).collect();
    task_ids.sort_unstable();
    Ok(PassReport {
        task_count: tallies.len(),
        pass_at_k: per_k,
        one_plus_correct: solved / count,
        task_ids,
    })
}

/// `exp(-mean token log-prob)` of `text` under the backend.
pub fn perplexity(backend: &dyn ModelBackend, text: &str) -> Result<f64, MetricsError> {
    let response = backend::score(
        backend,
        &ScoringRequest {
            text: text.to_string(),
        },
    )?;
    Ok((-response.total_logprob() / response.token_count as f64).exp())
}

/// Histogram over log10-spaced bins spanning the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

pub fn log_histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower: 10f64.powf(lo + width * i as f64),
            upper: 10f64.powf(lo + width * (i + 1) as f64),
            count: 0,
        })
        .collect();
    for v in finite {
        let idx = (((v.log10() - lo) / width) as usize).min(bins - 1);
        out[idx].count += 1;
    }
    out
}

/// Bug categories used when tagging feedback.
pub const BUG_CATEGORIES: [&str; 11] = [
    "logic",
    "formatting",
    "missing_step",
    "algebra",
    "recursion",
    "regex",
    "function_semantics",
    "dynamic_programming",
    "extra_step",
    "no_feedback_needed",
    "unrelated",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStats {
    pub annotation_count: usize,
    /// Fraction of annotations carrying each tag. Every standard category is
    /// present; unrecognised tags are kept under their own name.
    pub category_fractions: BTreeMap<String, f64>,
    /// Mean over annotations that record a bug count.
    pub avg_bugs_addressed: Option<f64>,
    pub avg_words: f64,
    /// Population standard deviation of the word counts.
    pub words_stddev: f64,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn feedback_stats(annotations: &[FeedbackAnnotation]) -> Result<FeedbackStats, MetricsError> {
    if annotations.is_empty() {
        return Err(MetricsError::Empty);
    }
    let count = annotations.len() as f64;
    let mut tags: BTreeMap<String, usize> =
        BUG_CATEGORIES.iter().map(|c| (c.to_string(), 0)).collect();
    for a in annotations {
        let mut seen: Vec<&str> = a.bug_tags.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for tag in seen {
            *tags.entry(tag.to_string()).or_default() += 1;
        }
    }
    let bugs: Vec<f64> = annotations
        .iter()
        .filter_map(|a| a.bugs_addressed.map(f64::from))
        .collect();
    let words: Vec<f64> = annotations
        .iter()
        .map(|a| word_count(&a.feedback_text) as f64)
        .collect();
    let avg_words = words.iter().sum::<f64>() / count;
    let variance = words.iter().map(|w| (w - avg_words).powi(2)).sum::<f64>() / count;
    Ok(FeedbackStats {
        annotation_count: annotations.len(),
        category_fractions: tags.into_iter().map(|(k, v)| (k, v as f64 / count)).collect(),
        avg_bugs_addressed: (!bugs.is_empty()).then(|| bugs.iter().sum::<f64>() / bugs.len() as f64),
        avg_words,
        words_stddev: variance.sqrt(),
    })
}

/// Mean refinement pass rate (`c / n` of each annotation's refinement
/// tally) grouped by the number of bugs the feedback addressed.
pub fn pass_rate_by_bug_count(observations: &[(u32, TaskTally)]) -> BTreeMap<u32, f64> {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (bugs, tally) in observations {
        if tally.n > 0 {
            groups.entry(*bugs).or_default().push(tally.c as f64 / tally.n as f64);
        }
    }
    groups
        .into_iter()
        .map(|(bugs, rates)| (bugs, rates.iter().sum::<f64>() / rates.len() as f64))
        .collect()
}

pub fn percent(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Left-aligned plain-text table with a dashed rule under the header.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let columns = headers.len().max(rows.iter().map(Vec::len).max().unwrap_or(0));
    let mut widths = vec![0; columns];
    let cells = |row: &[String]| -> Vec<String> {
        (0..columns).map(|i| row.get(i).cloned().unwrap_or_default()).collect()
    };
    let header: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let all: Vec<Vec<String>> = std::iter::once(cells(&header))
        .chain(rows.iter().map(|r| cells(r)))
        .collect();
    for row in &all {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |row: &[String]| -> String {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(&all[0]);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &all[1..] {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
