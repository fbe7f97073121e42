//! Stage backends behind one abstraction: localizers, extractors (dedicated
//! OCR or chat-completion) and analyzers (chat-completion).
//!
//! Transports are remote HTTP services, deterministic simulations, or the
//! ground truth itself. Every backend handles its own transport retries; the
//! orchestrator only sees a final success, a failed call (degrades to missing
//! data) or an unavailable backend (aborts the run).

mod registry;
pub mod remote;
pub mod rules;
pub mod scripted;
pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Raster;
use crate::domain::{BoundingBox, ImageRecord, ImprintRecord};
use crate::protocol::CropRef;

pub use registry::{BackendDescriptor, BackendKind, Extractor, ExtractorApi, Registry, Transport};
pub use remote::RetryPolicy;
pub use rules::analyze_rule_based;
pub use sim::{extract_sim, LatencyModel, SimConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// The call failed after all attempts; the affected crops become missing.
    #[error("backend {backend_id}: call failed after {attempts} attempt(s): {reason}")]
    CallFailed { backend_id: String, attempts: u32, reason: String },
    /// The backend cannot serve at all; the run aborts.
    #[error("backend {backend_id} unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { backend_id: String, attempts: u32, reason: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::CallFailed { attempts, .. } | BackendError::Unavailable { attempts, .. } => *attempts,
            BackendError::Config(_) => 0,
        }
    }
}

/// Per-call context handed to backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallContext {
    /// Seed of the current run repetition.
    pub run_seed: u64,
    /// Transport retries allowed after the first attempt.
    pub retry_limit: u32,
    /// Identity of the call, stable across runs (chunk or crop key).
    pub call_key: u64,
    /// Protocol-level resubmission round (0 for the first submission).
    pub round: u32,
}

/// A text region produced by stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedCrop {
    pub image_id: String,
    /// Ground-truth imprint id for ground-truth and simulated localizers;
    /// detection index for remote ones.
    pub imprint_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// The ground-truth imprint this crop covers, when known. Simulated
    /// extractors read their text from here.
    #[serde(skip)]
    pub source: Option<ImprintRecord>,
}

impl LocalizedCrop {
    pub fn crop_ref(&self) -> CropRef {
        CropRef { image_id: self.image_id.clone(), imprint_id: self.imprint_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub crops: Vec<LocalizedCrop>,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcrOutput {
    pub text: String,
    pub confidence: f64,
    pub latency_s: f64,
    pub attempts: u32,
}

/// A chat-completion request. `task` carries the structured content the
/// prompt was built from so simulated models can answer without pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub prompt: String,
    /// Base64 data URLs, one per attached crop.
    pub images: Vec<String>,
    pub max_tokens: u32,
    pub task: ChatTask,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChatTask {
    Extract { crops: Vec<LocalizedCrop> },
    Analyze { tagged: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub attempts: u32,
    /// Time spent on the call, including injected or network latency.
    pub latency_s: f64,
}

pub trait Localizer: Send + Sync {
    fn id(&self) -> &str;
    fn needs_pixels(&self) -> bool {
        false
    }
    fn localize(
        &self,
        image: &ImageRecord,
        pixels: Option<&Raster>,
        ctx: &CallContext,
    ) -> Result<Localization, BackendError>;
}

/// Dedicated OCR: one crop per call, with a confidence score.
pub trait CropExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn needs_pixels(&self) -> bool {
        false
    }
    fn extract(
        &self,
        crop: &LocalizedCrop,
        pixels: Option<&Raster>,
        ctx: &CallContext,
    ) -> Result<OcrOutput, BackendError>;
}

pub trait ChatModel: Send + Sync {
    fn id(&self) -> &str;
    fn max_crops_per_call(&self) -> usize;
    fn needs_pixels(&self) -> bool {
        false
    }
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<ChatReply, BackendError>;
}

/// Ground-truth boxes, verbatim.
#[derive(Debug, Clone)]
pub struct GroundTruthLocalizer {
    id: String,
}

impl GroundTruthLocalizer {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

pub fn ground_truth_crops(image: &ImageRecord) -> Vec<LocalizedCrop> {
    image
        .imprints
        .iter()
        .map(|imp| LocalizedCrop {
            image_id: image.image_id.clone(),
            imprint_id: imp.imprint_id,
            bbox: imp.bbox,
            source: Some(imp.clone()),
        })
        .collect()
}

impl Localizer for GroundTruthLocalizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn localize(&self, image: &ImageRecord, _: Option<&Raster>, _: &CallContext) -> Result<Localization, BackendError> {
        Ok(Localization { crops: ground_truth_crops(image), latency_s: 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GeneratorConfig};
    use crate::domain::DatasetStyle;

    #[test]
    fn ground_truth_passes_boxes_through() {
        let m = generate(&GeneratorConfig::for_style(DatasetStyle::RadphiLike, 5, 3)).unwrap();
        let gt = GroundTruthLocalizer::new("gt");
        let ctx = CallContext { run_seed: 0, retry_limit: 0, call_key: 0, round: 0 };
        for r in &m.records {
            let out = gt.localize(r, None, &ctx).unwrap();
            let boxes: Vec<_> = out.crops.iter().map(|c| c.bbox).collect();
            let expected: Vec<_> = r.imprints.iter().map(|i| i.bbox).collect();
            assert_eq!(boxes, expected);
        }
    }
}
