use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::http::{HttpBackend, HttpTrainer, HttpTransportConfig, OpenAiCompatBackend};
use super::mock::{MockBackend, MockScript};
use super::trainer::{MockTrainer, MockTrainerOutcome, TrainerBackend};
use super::{BackendError, ModelBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        script: Option<MockScript>,
        /// JSON or TOML script file, relative to the config file.
        #[serde(default)]
        script_path: Option<PathBuf>,
    },
    Http {
        #[serde(default)]
        model: Option<String>,
        #[serde(flatten)]
        transport: HttpTransportConfig,
    },
    #[serde(rename = "openai")]
    OpenAi {
        model: String,
        #[serde(flatten)]
        transport: HttpTransportConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    Mock {
        outcomes: Vec<MockTrainerOutcome>,
        #[serde(default)]
        polls_to_finish: u32,
        #[serde(default)]
        fail: bool,
    },
    Http {
        #[serde(flatten)]
        transport: HttpTransportConfig,
    },
}

/// Named backends. A reference `name/model` derives a backend from an HTTP
/// or OpenAI-style entry `name` with its model replaced, which is how
/// fine-tuned models reported by a trainer are addressed.
#[derive(Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<dyn ModelBackend>>,
    trainers: BTreeMap<String, Arc<dyn TrainerBackend>>,
    specs: BTreeMap<String, BackendSpec>,
    derived: Mutex<BTreeMap<String, Arc<dyn ModelBackend>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(
        models: &BTreeMap<String, BackendSpec>,
        trainers: &BTreeMap<String, TrainerSpec>,
        base_dir: &Path,
    ) -> Result<Self, BackendError> {
        let mut registry = Registry::new();
        for (name, spec) in models {
            let backend = build_model(name, spec, None, base_dir)?;
            registry.models.insert(name.clone(), backend);
            registry.specs.insert(name.clone(), spec.clone());
        }
        for (name, spec) in trainers {
            let trainer: Arc<dyn TrainerBackend> = match spec {
                TrainerSpec::Mock {
                    outcomes,
                    polls_to_finish,
                    fail,
                } => Arc::new(MockTrainer {
                    name: name.clone(),
                    outcomes: outcomes.clone(),
                    polls_to_finish: *polls_to_finish,
                    fail: *fail,
                }),
                TrainerSpec::Http { transport } => Arc::new(HttpTrainer::new(name.clone(), transport)?),
            };
            registry.trainers.insert(name.clone(), trainer);
        }
        Ok(registry)
    }

    pub fn with_model(mut self, backend: Arc<dyn ModelBackend>) -> Self {
        self.models.insert(backend.name().to_string(), backend);
        self
    }

    pub fn with_trainer(mut self, trainer: Arc<dyn TrainerBackend>) -> Self {
        self.trainers.insert(trainer.name().to_string(), trainer);
        self
    }

    pub fn model(&self, reference: &str) -> Result<Arc<dyn ModelBackend>, BackendError> {
        if let Some(backend) = self.models.get(reference) {
            return Ok(backend.clone());
        }
        let (base, model) = reference
            .split_once('/')
            .ok_or_else(|| BackendError::UnknownBackend(reference.to_string()))?;
        let spec = self
            .specs
            .get(base)
            .ok_or_else(|| BackendError::UnknownBackend(reference.to_string()))?;
        let mut derived = self.derived.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(backend) = derived.get(reference) {
            return Ok(backend.clone());
        }
        let backend = build_model(reference, spec, Some(model), Path::new("."))?;
        derived.insert(reference.to_string(), backend.clone());
        Ok(backend)
    }

    pub fn trainer(&self, name: &str) -> Result<Arc<dyn TrainerBackend>, BackendError> {
        self.trainers
            .get(name)
            .cloned()
            .ok_or_else(|| BackendError::UnknownBackend(name.to_string()))
    }
}

fn build_model(
    name: &str,
    spec: &BackendSpec,
    model_override: Option<&str>,
    base_dir: &Path,
) -> Result<Arc<dyn ModelBackend>, BackendError> {
    Ok(match spec {
        BackendSpec::Mock { .. } if model_override.is_some() => {
            return Err(BackendError::UnknownBackend(name.to_string()))
        }
        BackendSpec::Mock {
            script,
            script_path,
        } => {
            let script = match (script, script_path) {
                (Some(s), None) => s.clone(),
                (None, Some(path)) => load_script(&base_dir.join(path))?,
                (None, None) => MockScript::default(),
                (Some(_), Some(_)) => {
                    return Err(BackendError::Config(format!(
                        "mock backend {name}: give either script or script_path"
                    )))
                }
            };
            Arc::new(MockBackend::new(name, script))
        }
        BackendSpec::Http { model, transport } => Arc::new(HttpBackend::new(
            name,
            model_override.map(str::to_string).or_else(|| model.clone()),
            transport,
        )?),
        BackendSpec::OpenAi { model, transport } => Arc::new(OpenAiCompatBackend::new(
            name,
            model_override.unwrap_or(model),
            transport,
        )?),
    })
}

fn load_script(path: &Path) -> Result<MockScript, BackendError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
}
