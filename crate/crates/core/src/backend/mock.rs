use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_stop_sequences, BackendError, CompletionRequest, ModelBackend, ScoringRequest,
    ScoringResponse,
};
use crate::seeds::{derive_seed, stable_hash};

/// A response rule: applies when every `contains` substring occurs in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: Vec<String>,
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScoreRule {
    pub contains: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockSampling {
    /// Sample `i` is `completions[i % len]`.
    #[default]
    Cycle,
    /// Draw with replacement from a generator seeded by the request seed and
    /// the prompt text.
    Seeded,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default_completions: Vec<String>,
    pub sampling: MockSampling,
    pub score_rules: Vec<MockScoreRule>,
    /// When set, unmatched text scores one token per character at this log-prob.
    pub default_token_logprob: Option<f64>,
    /// Fail every completion call after this many successful ones.
    pub fail_after_calls: Option<u64>,
}

impl MockScript {
    pub fn always(completions: &[&str]) -> Self {
        MockScript {
            default_completions: completions.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn rule(mut self, contains: &[&str], completions: &[&str]) -> Self {
        self.rules.push(MockRule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            completions: completions.iter().map(|s| s.to_string()).collect(),
        });
        self
    }
}

/// Scripted, fully deterministic backend.
#[derive(Debug)]
pub struct MockBackend {
    name: String,
    script: MockScript,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(name: impl Into<String>, script: MockScript) -> Self {
        MockBackend {
            name: name.into(),
            script,
            calls: AtomicU64::new(0),
        }
    }

    fn responses_for(&self, prompt: &str) -> Option<&[String]> {
        self.script
            .rules
            .iter()
            .find(|r| r.contains.iter().all(|s| prompt.contains(s.as_str())))
            .map(|r| r.completions.as_slice())
            .or(Some(self.script.default_completions.as_slice()))
            .filter(|c| !c.is_empty())
    }
}

impl ModelBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if matches!(self.script.fail_after_calls, Some(limit) if call >= limit) {
            return Err(BackendError::Mock(format!("scripted failure on call {call}")));
        }
        let pool = self
            .responses_for(&request.prompt)
            .ok_or_else(|| BackendError::Mock("no scripted response for prompt".into()))?;
        let n = request.num_samples as usize;
        let picks: Vec<&String> = match self.script.sampling {
            MockSampling::Cycle => (0..n).map(|i| &pool[i % pool.len()]).collect(),
            MockSampling::Seeded => {
                let seed = derive_seed(
                    request.seed.unwrap_or(0),
                    stable_hash(request.prompt.as_bytes()),
                );
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
            }
        };
        Ok(picks
            .into_iter()
            .map(|c| apply_stop_sequences(c, &request.stop_sequences).to_string())
            .collect())
    }

    fn score(&self, request: &ScoringRequest) -> Result<ScoringResponse, BackendError> {
        if let Some(rule) = self
            .script
            .score_rules
            .iter()
            .find(|r| r.contains.iter().all(|s| request.text.contains(s.as_str())))
        {
            return Ok(ScoringResponse::new(rule.token_logprobs.clone()));
        }
        match self.script.default_token_logprob {
            Some(lp) => Ok(ScoringResponse::new(vec![lp; request.text.chars().count()])),
            None => Err(BackendError::Unsupported("scoring")),
        }
    }
}
