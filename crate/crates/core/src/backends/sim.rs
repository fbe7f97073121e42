//! Deterministic simulated backends and their noise and fault models.
//!
//! Small-text digit confusion: below `small_text_threshold` pixels of font
//! height, every digit in the confusion map's domain is replaced with
//! probability `confusion_prob`. For every such digit a uniform draw and a
//! replacement index are always consumed, so raising `confusion_prob` on a
//! fixed seed only ever adds substitutions.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rules::analyze_rule_based;
use super::{
    BackendError, CallContext, ChatModel, ChatReply, ChatRequest, ChatTask, CropExtractor, Localization, LocalizedCrop,
    Localizer, OcrOutput,
};
use crate::dataset::Raster;
use crate::domain::{BoundingBox, ImageRecord, ImprintRecord};
use crate::protocol::{AnalysisResponse, ExtractionItem};
use crate::rng::{self, hash_str, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub mean: f64,
    pub stddev: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { mean: 0.0, stddev: 0.0 }
    }
}

impl LatencyModel {
    pub fn fixed(seconds: f64) -> Self {
        Self { mean: seconds, stddev: 0.0 }
    }

    /// Normal draw truncated at zero.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.stddev <= 0.0 {
            return self.mean.max(0.0);
        }
        Normal::new(self.mean, self.stddev).map(|n| n.sample(rng).max(0.0)).unwrap_or(self.mean)
    }
}

fn default_threshold() -> u32 {
    12
}

fn default_confusion_map() -> BTreeMap<char, Vec<char>> {
    BTreeMap::from([('0', vec!['3', '6', '8'])])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub confusion_prob: f64,
    #[serde(default = "default_threshold")]
    pub small_text_threshold: u32,
    #[serde(default = "default_confusion_map")]
    pub confusion_map: BTreeMap<char, Vec<char>>,
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default)]
    pub latency_model: LatencyModel,
    #[serde(default)]
    pub seed: u64,
    /// Localizer only: probability of missing a ground-truth box.
    #[serde(default)]
    pub drop_prob: f64,
    /// Localizer only: maximum box jitter per edge, pixels.
    #[serde(default)]
    pub jitter_px: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            confusion_prob: 0.0,
            small_text_threshold: default_threshold(),
            confusion_map: default_confusion_map(),
            failure_rate: 0.0,
            latency_model: LatencyModel::default(),
            seed: 0,
            drop_prob: 0.0,
            jitter_px: 0,
        }
    }
}

impl SimConfig {
    pub fn with_confusion(mut self, p: f64) -> Self {
        self.confusion_prob = p;
        self
    }

    pub fn with_failure_rate(mut self, p: f64) -> Self {
        self.failure_rate = p;
        self
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency_model = latency;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("confusion_prob", self.confusion_prob),
            ("failure_rate", self.failure_rate),
            ("drop_prob", self.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} {p} is not a probability"));
            }
        }
        if self.small_text_threshold < 1 {
            return Err("small_text_threshold must be at least 1".into());
        }
        if self.latency_model.mean < 0.0 || self.latency_model.stddev < 0.0 {
            return Err("latency model parameters must be non-negative".into());
        }
        if self.confusion_map.values().any(|v| v.is_empty()) {
            return Err("confusion_map entries need at least one replacement".into());
        }
        Ok(())
    }

    /// Confidence a simulated dedicated OCR reports for a crop: grows with
    /// contrast and font height, always strictly inside (0, 1).
    pub fn confidence(&self, imprint: &ImprintRecord) -> f64 {
        let h = imprint.font_height as f64;
        imprint.contrast * h / (h + self.small_text_threshold as f64)
    }
}

/// Simulated transcription of one imprint: verbatim unless the font is
/// below the small-text threshold, in which case mapped digits are
/// substituted independently with `confusion_prob`.
pub fn extract_sim(image_id: &str, imprint: &ImprintRecord, cfg: &SimConfig, run_seed: u64) -> String {
    if imprint.font_height >= cfg.small_text_threshold || cfg.confusion_map.is_empty() {
        return imprint.text.clone();
    }
    let mut rng = rng::stream(cfg.seed, Purpose::Confusion, &[run_seed, hash_str(image_id), imprint.imprint_id as u64]);
    imprint
        .text
        .chars()
        .map(|c| match cfg.confusion_map.get(&c) {
            Some(replacements) => {
                let u: f64 = rng.random();
                let pick = rng.random_range(0..replacements.len());
                if u < cfg.confusion_prob {
                    replacements[pick]
                } else {
                    c
                }
            }
            None => c,
        })
        .collect()
}

/// Runs up to `retry_limit + 1` simulated attempts, sleeping the injected
/// latency for each. Returns the attempt count and total latency.
fn attempt_calls(cfg: &SimConfig, backend_id: &str, ctx: &CallContext) -> Result<(u32, f64), BackendError> {
    let mut total = 0.0;
    for attempt in 0..=ctx.retry_limit {
        let key = [ctx.run_seed, ctx.call_key, ctx.round as u64, attempt as u64];
        let latency = cfg.latency_model.draw(&mut rng::stream(cfg.seed, Purpose::Latency, &key));
        if latency > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(latency));
        }
        total += latency;
        let fails = cfg.failure_rate > 0.0 && {
            let u: f64 = rng::stream(cfg.seed, Purpose::Failure, &key).random();
            u < cfg.failure_rate
        };
        if !fails {
            return Ok((attempt + 1, total));
        }
    }
    Err(BackendError::CallFailed {
        backend_id: backend_id.to_string(),
        attempts: ctx.retry_limit + 1,
        reason: "simulated API error".into(),
    })
}

/// Ground-truth boxes with random misses and edge jitter.
#[derive(Debug, Clone)]
pub struct SimLocalizer {
    id: String,
    cfg: SimConfig,
}

impl SimLocalizer {
    pub fn new(id: impl Into<String>, cfg: SimConfig) -> Self {
        Self { id: id.into(), cfg }
    }
}

fn jitter(bbox: BoundingBox, j: u32, rng: &mut impl Rng, width: u32, height: u32) -> BoundingBox {
    if j == 0 {
        return bbox;
    }
    let j = j as i64;
    let mut d = || rng.random_range(-j..=j);
    let x0 = (bbox.x as i64 + d()).clamp(0, width as i64 - 1);
    let y0 = (bbox.y as i64 + d()).clamp(0, height as i64 - 1);
    let x1 = (bbox.right() as i64 + d()).clamp(x0 + 1, width as i64);
    let y1 = (bbox.bottom() as i64 + d()).clamp(y0 + 1, height as i64);
    BoundingBox::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32)
}

impl Localizer for SimLocalizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn localize(
        &self,
        image: &ImageRecord,
        _: Option<&Raster>,
        ctx: &CallContext,
    ) -> Result<Localization, BackendError> {
        let (_, latency_s) = attempt_calls(&self.cfg, &self.id, ctx)?;
        let mut crops = Vec::with_capacity(image.imprints.len());
        for imp in &image.imprints {
            let mut rng = rng::stream(
                self.cfg.seed,
                Purpose::Localize,
                &[ctx.run_seed, hash_str(&image.image_id), imp.imprint_id as u64],
            );
            let u: f64 = rng.random();
            if u < self.cfg.drop_prob {
                continue;
            }
            crops.push(LocalizedCrop {
                image_id: image.image_id.clone(),
                imprint_id: imp.imprint_id,
                bbox: jitter(imp.bbox, self.cfg.jitter_px, &mut rng, image.width, image.height),
                source: Some(imp.clone()),
            });
        }
        Ok(Localization { crops, latency_s })
    }
}

/// Dedicated-OCR stand-in: one crop per call, with a confidence score.
#[derive(Debug, Clone)]
pub struct SimOcr {
    id: String,
    cfg: SimConfig,
}

impl SimOcr {
    pub fn new(id: impl Into<String>, cfg: SimConfig) -> Self {
        Self { id: id.into(), cfg }
    }
}

impl CropExtractor for SimOcr {
    fn id(&self) -> &str {
        &self.id
    }

    fn extract(&self, crop: &LocalizedCrop, _: Option<&Raster>, ctx: &CallContext) -> Result<OcrOutput, BackendError> {
        let (attempts, latency_s) = attempt_calls(&self.cfg, &self.id, ctx)?;
        let (text, confidence) = match &crop.source {
            Some(imp) => (extract_sim(&crop.image_id, imp, &self.cfg, ctx.run_seed), self.cfg.confidence(imp)),
            None => (String::new(), 0.0),
        };
        Ok(OcrOutput { text, confidence, latency_s, attempts })
    }
}

/// Simulated chat-completion model. Extraction requests are answered with
/// the confusion model, analysis requests with the rule-based analyzer.
#[derive(Debug, Clone)]
pub struct SimChat {
    id: String,
    cfg: SimConfig,
    max_crops: usize,
}

impl SimChat {
    pub fn new(id: impl Into<String>, cfg: SimConfig, max_crops: usize) -> Self {
        Self { id: id.into(), cfg, max_crops: max_crops.max(1) }
    }
}

impl ChatModel for SimChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_crops_per_call(&self) -> usize {
        self.max_crops
    }

    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<ChatReply, BackendError> {
        let (attempts, latency_s) = attempt_calls(&self.cfg, &self.id, ctx)?;
        let text = match &request.task {
            ChatTask::Extract { crops } => {
                let items: Vec<ExtractionItem> = crops
                    .iter()
                    .enumerate()
                    .map(|(i, crop)| ExtractionItem {
                        id: i as u32,
                        text: crop
                            .source
                            .as_ref()
                            .map(|imp| extract_sim(&crop.image_id, imp, &self.cfg, ctx.run_seed))
                            .unwrap_or_default(),
                    })
                    .collect();
                serde_json::to_string(&items).expect("serializable")
            }
            ChatTask::Analyze { tagged } => {
                let results = analyze_rule_based(tagged).map_err(|e| BackendError::CallFailed {
                    backend_id: self.id.clone(),
                    attempts,
                    reason: e.to_string(),
                })?;
                serde_json::to_string(&AnalysisResponse { results }).expect("serializable")
            }
        };
        Ok(ChatReply { text, attempts, latency_s })
    }
}
