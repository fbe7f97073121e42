use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::remote::{RemoteChat, RemoteLocalizer, RemoteOcr, RetryPolicy};
use super::sim::{SimChat, SimConfig, SimLocalizer, SimOcr};
use super::{BackendError, ChatModel, CropExtractor, GroundTruthLocalizer, Localizer};
use crate::domain::DEFAULT_CHUNK_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Localizer,
    Extractor,
    Analyzer,
}

/// Call shape of an extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorApi {
    /// One crop per call, confidence reported.
    Dedicated,
    /// Chunks of crops in one chat-completion call.
    #[default]
    ChatCompletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transport {
    Remote {
        endpoint: String,
        #[serde(default)]
        model: String,
        #[serde(default)]
        auth_env: Option<String>,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
    Simulated(SimConfig),
    GroundTruth,
}

fn default_timeout_s() -> f64 {
    60.0
}

fn default_max_crops() -> usize {
    DEFAULT_CHUNK_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub kind: BackendKind,
    pub transport: Transport,
    #[serde(default = "default_max_crops")]
    pub max_crops_per_call: usize,
    /// Extractors only.
    #[serde(default)]
    pub api: ExtractorApi,
}

impl BackendDescriptor {
    pub fn simulated(id: &str, kind: BackendKind, api: ExtractorApi, sim: SimConfig) -> Self {
        Self {
            backend_id: id.to_string(),
            kind,
            transport: Transport::Simulated(sim),
            max_crops_per_call: DEFAULT_CHUNK_SIZE,
            api,
        }
    }

    pub fn with_max_crops(mut self, n: usize) -> Self {
        self.max_crops_per_call = n;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.backend_id.is_empty() {
            return Err("backend_id is empty".into());
        }
        if self.max_crops_per_call == 0 {
            return Err(format!("{}: max_crops_per_call must be at least 1", self.backend_id));
        }
        match &self.transport {
            Transport::Remote { endpoint, model, timeout_s, .. } => {
                if endpoint.is_empty() {
                    return Err(format!("{}: remote transport needs an endpoint", self.backend_id));
                }
                let needs_model = self.kind == BackendKind::Analyzer
                    || (self.kind == BackendKind::Extractor && self.api == ExtractorApi::ChatCompletion);
                if needs_model && model.is_empty() {
                    return Err(format!("{}: remote chat transport needs a model name", self.backend_id));
                }
                if *timeout_s <= 0.0 {
                    return Err(format!("{}: timeout_s must be positive", self.backend_id));
                }
            }
            Transport::Simulated(sim) => sim.validate().map_err(|e| format!("{}: {e}", self.backend_id))?,
            Transport::GroundTruth if self.kind != BackendKind::Localizer => {
                return Err(format!("{}: ground-truth transport is only valid for localizers", self.backend_id));
            }
            Transport::GroundTruth => {}
        }
        if self.kind == BackendKind::Analyzer && self.api == ExtractorApi::Dedicated {
            return Err(format!("{}: analyzers use the chat-completion api", self.backend_id));
        }
        Ok(())
    }

    fn retry_policy(&self) -> RetryPolicy {
        match &self.transport {
            Transport::Remote { timeout_s, .. } => {
                RetryPolicy { timeout: Duration::from_secs_f64(*timeout_s), ..RetryPolicy::default() }
            }
            _ => RetryPolicy::default(),
        }
    }
}

/// A built extractor, by call shape.
#[derive(Clone)]
pub enum Extractor {
    Dedicated(Arc<dyn CropExtractor>),
    Chat(Arc<dyn ChatModel>),
}

impl Extractor {
    pub fn id(&self) -> &str {
        match self {
            Extractor::Dedicated(e) => e.id(),
            Extractor::Chat(c) => c.id(),
        }
    }
}

/// The set of known backends, usually loaded from `backends.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Registry {
    pub backends: Vec<BackendDescriptor>,
}

impl Registry {
    pub fn new(backends: Vec<BackendDescriptor>) -> Result<Self, BackendError> {
        let reg = Self { backends };
        reg.validate()?;
        Ok(reg)
    }

    /// Simulated backends available without any configuration.
    pub fn builtin() -> Self {
        use BackendKind::*;
        use ExtractorApi::*;
        let sim = SimConfig::default;
        Self {
            backends: vec![
                BackendDescriptor {
                    backend_id: "ground-truth".into(),
                    kind: Localizer,
                    transport: Transport::GroundTruth,
                    max_crops_per_call: DEFAULT_CHUNK_SIZE,
                    api: ChatCompletion,
                },
                BackendDescriptor::simulated(
                    "sim-localizer",
                    Localizer,
                    ChatCompletion,
                    SimConfig { drop_prob: 0.02, jitter_px: 2, ..sim() },
                ),
                BackendDescriptor::simulated("sim-ocr", Extractor, Dedicated, sim().with_confusion(0.3)),
                BackendDescriptor::simulated("sim-ocr-clean", Extractor, Dedicated, sim()),
                BackendDescriptor::simulated("sim-lmm", Extractor, ChatCompletion, sim().with_confusion(0.05)),
                BackendDescriptor::simulated("sim-lmm-clean", Extractor, ChatCompletion, sim()),
                BackendDescriptor::simulated("sim-lmm-small", Extractor, ChatCompletion, sim().with_confusion(0.05))
                    .with_max_crops(5),
                BackendDescriptor::simulated("rule-based", Analyzer, ChatCompletion, sim()),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.backends {
            d.validate().map_err(BackendError::Config)?;
            if !seen.insert(d.backend_id.as_str()) {
                return Err(BackendError::Config(format!("duplicate backend id {}", d.backend_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let reg: Registry =
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        reg.validate()?;
        Ok(reg)
    }

    /// Hex SHA-256 of the canonical registry JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("registry serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn get(&self, id: &str) -> Option<&BackendDescriptor> {
        self.backends.iter().find(|d| d.backend_id == id)
    }

    pub fn insert(&mut self, descriptor: BackendDescriptor) {
        self.backends.retain(|d| d.backend_id != descriptor.backend_id);
        self.backends.push(descriptor);
    }

    fn lookup(&self, id: &str, kind: BackendKind) -> Result<&BackendDescriptor, BackendError> {
        let d = self.get(id).ok_or_else(|| BackendError::Config(format!("unknown backend `{id}`")))?;
        if d.kind != kind {
            return Err(BackendError::Config(format!("backend `{id}` is a {:?}, not a {kind:?}", d.kind)));
        }
        Ok(d)
    }

    pub fn localizer(&self, id: &str) -> Result<Arc<dyn Localizer>, BackendError> {
        let d = self.lookup(id, BackendKind::Localizer)?;
        Ok(match &d.transport {
            Transport::GroundTruth => Arc::new(GroundTruthLocalizer::new(id)),
            Transport::Simulated(sim) => Arc::new(SimLocalizer::new(id, sim.clone())),
            Transport::Remote { endpoint, auth_env, .. } => {
                Arc::new(RemoteLocalizer::new(id, endpoint, auth_env.clone(), d.retry_policy()))
            }
        })
    }

    pub fn extractor(&self, id: &str) -> Result<Extractor, BackendError> {
        let d = self.lookup(id, BackendKind::Extractor)?;
        Ok(match (&d.transport, d.api) {
            (Transport::Simulated(sim), ExtractorApi::Dedicated) => {
                Extractor::Dedicated(Arc::new(SimOcr::new(id, sim.clone())))
            }
            (Transport::Remote { endpoint, auth_env, .. }, ExtractorApi::Dedicated) => {
                Extractor::Dedicated(Arc::new(RemoteOcr::new(id, endpoint, auth_env.clone(), d.retry_policy())))
            }
            (Transport::GroundTruth, ExtractorApi::Dedicated) => {
                return Err(BackendError::Config(format!("backend `{id}` has no extraction transport")))
            }
            (_, ExtractorApi::ChatCompletion) => Extractor::Chat(self.chat(d)?),
        })
    }

    pub fn analyzer(&self, id: &str) -> Result<Arc<dyn ChatModel>, BackendError> {
        let d = self.lookup(id, BackendKind::Analyzer)?;
        self.chat(d)
    }

    fn chat(&self, d: &BackendDescriptor) -> Result<Arc<dyn ChatModel>, BackendError> {
        let id = d.backend_id.as_str();
        match &d.transport {
            Transport::Simulated(sim) => Ok(Arc::new(SimChat::new(id, sim.clone(), d.max_crops_per_call))),
            Transport::Remote { endpoint, model, auth_env, .. } => Ok(Arc::new(RemoteChat::new(
                id,
                endpoint,
                model,
                auth_env.clone(),
                d.max_crops_per_call,
                d.retry_policy(),
            ))),
            Transport::GroundTruth => Err(BackendError::Config(format!("backend `{id}` has no chat transport"))),
        }
    }
}
