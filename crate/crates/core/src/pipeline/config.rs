use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::backend::{BackendSpec, Hyperparams, TrainerSpec};
use crate::model::SplitConfig;
use crate::sandbox::SandboxConfig;
use crate::seeds::stable_hash;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub sampling: u64,
    pub selection: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            sampling: 0,
            selection: 1,
            shuffle: 2,
        }
    }
}

/// Names of entries in `models` / `trainers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRefs {
    pub policy: String,
    pub refiner: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub trainer: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSourceKind {
    /// Accepted records exported by the annotation service.
    #[default]
    Human,
    /// Feedback written by the `feedback` backend.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub source: FeedbackSourceKind,
    /// Annotation export (JSON lines) for the human source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export: Option<PathBuf>,
    /// For the model source, annotate a seeded subsample of this many
    /// zero-correct training tasks instead of all of them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_limit: Option<usize>,
    /// Exemplars prepended to feedback prompts; needs `exemplars` or a
    /// template with that many.
    pub shots: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            source: FeedbackSourceKind::Human,
            export: None,
            task_limit: None,
            shots: 0,
            temperature: 0.8,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Task file (MBPP-style JSON lines), relative to the config file.
    pub dataset: PathBuf,
    #[serde(default = "default_samples")]
    pub samples_per_task: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_ks")]
    pub ks: Vec<u64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Exemplars prepended to refinement prompts.
    #[serde(default)]
    pub refine_shots: usize,
    /// Refinement template file; the built-in markers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    /// Exemplar annotation records (JSON lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Seeds,
    pub backends: BackendRefs,
    /// Fine-tune the refiner on refine-split human refinements before
    /// refining the training split.
    #[serde(default)]
    pub train_refiner: bool,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    /// Reject hyperparameters outside the standard sweep.
    #[serde(default)]
    pub strict_sweep: bool,
    #[serde(default = "default_poll_ms")]
    pub trainer_poll_interval_ms: u64,
    #[serde(default = "default_trainer_timeout")]
    pub trainer_timeout_secs: u64,
    #[serde(default)]
    pub models: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub trainers: BTreeMap<String, TrainerSpec>,
}

fn default_samples() -> u32 {
    30
}
fn default_temperature() -> f64 {
    0.8
}
fn default_max_tokens() -> u32 {
    512
}
fn default_ks() -> Vec<u64> {
    vec![1, 10]
}
fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}
fn default_poll_ms() -> u64 {
    1000
}
fn default_trainer_timeout() -> u64 {
    24 * 3600
}

impl RunConfig {
    /// Config with defaults for everything but the dataset and backends.
    pub fn new(dataset: impl Into<PathBuf>, backends: BackendRefs) -> Self {
        RunConfig {
            dataset: dataset.into(),
            samples_per_task: default_samples(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            ks: default_ks(),
            parallelism: default_parallelism(),
            refine_shots: 0,
            template: None,
            exemplars: None,
            seeds: Seeds::default(),
            backends,
            train_refiner: false,
            feedback: FeedbackConfig::default(),
            splits: SplitConfig::default(),
            sandbox: SandboxConfig::default(),
            hyperparams: Hyperparams::default(),
            strict_sweep: false,
            trainer_poll_interval_ms: default_poll_ms(),
            trainer_timeout_secs: default_trainer_timeout(),
            models: BTreeMap::new(),
            trainers: BTreeMap::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a TOML config and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset);
        self.template.as_mut().map(join);
        self.exemplars.as_mut().map(join);
        self.feedback.export.as_mut().map(join);
        for spec in self.models.values_mut() {
            if let BackendSpec::Mock {
                script_path: Some(p),
                ..
            } = spec
            {
                join(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let max_k = self.ks.iter().copied().max().unwrap_or(0);
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(PipelineError::Config("ks must be non-empty and positive".into()));
        }
        if u64::from(self.samples_per_task) < max_k {
            return Err(PipelineError::Config(format!(
                "samples_per_task {} is below the largest k {max_k}",
                self.samples_per_task
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(PipelineError::Config("temperature must be finite and >= 0".into()));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be positive".into()));
        }
        self.splits.validate()?;
        self.sandbox.validate()?;
        self.hyperparams.validate()?;
        Ok(())
    }

    /// Fingerprint of every setting that influences run artifacts.
    /// Parallelism is excluded because results do not depend on it.
    pub fn fingerprint(&self) -> String {
        let mut normalized = self.clone();
        normalized.parallelism = 1;
        let json = serde_json::to_string(&normalized).unwrap_or_default();
        format!("{:016x}", stable_hash(json.as_bytes()))
    }
}
