//! Sequential three-stage pipeline: localize, extract, analyze.
//!
//! Each stage runs over the whole dataset before the next one starts. Setup A
//! extracts every crop with one dedicated-OCR call, Setup B sends chunks of
//! crops to a chat-completion model. Analysis always goes through the
//! tagged-string protocol, one image at a time.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::remote::png_data_url;
use crate::backends::{
    BackendError, CallContext, ChatModel, ChatRequest, ChatTask, Extractor, LocalizedCrop, Localizer, Registry,
};
use crate::dataset::{load_raster, DatasetManifest, Raster};
use crate::domain::{AnalysisVerdict, CropExtraction, ImageRecord, RunConfig, Setup};
use crate::metrics::{extraction_pairs, rank_ocr, wer_cer, MatchCriterion, OcrScore};
use crate::protocol::{
    align_extraction, build_analysis_prompt, build_extraction_prompt, chunk_crops, encode_tagged,
    parse_analysis_response, prompt_hash, Chunk, Classification, CropRef,
};
use crate::rng::{self, hash_str};

const EXTRACT_MAX_TOKENS: u32 = 1024;
const ANALYZE_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Localize,
    Extract,
    Verify,
    Analyze,
}

impl Stage {
    fn key(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Localize => "localize",
            Stage::Extract => "extract",
            Stage::Verify => "verify",
            Stage::Analyze => "analyze",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A call that returned a usable answer.
    Ok,
    /// A reply that failed schema or alignment checks and was resubmitted.
    Retry,
    /// A call whose items ended up missing or unclassified.
    Failed,
}

/// One backend call, in issue order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub seq: u64,
    pub stage: Stage,
    pub image_id: String,
    pub kind: EventKind,
    /// Seconds since the run started, taken when the call returned.
    pub t_offset: f64,
    /// Latency the backend reported for the call.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub extractions: Vec<CropExtraction>,
    pub verdicts: Vec<AnalysisVerdict>,
    /// Localized imprints without an extraction.
    pub missing: Vec<u32>,
    /// Extracted imprints the analyzer never classified.
    #[serde(default)]
    pub unclassified: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_config: RunConfig,
    pub run_index: u32,
    pub run_seed: u64,
    pub per_image: Vec<ImageResult>,
    /// Seconds from the first stage-1 call to the last stage-3 reply.
    pub wall_time: f64,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid_threshold: Option<f64>,
    #[serde(skip)]
    pub events: Vec<StageEvent>,
}

impl RunResult {
    pub fn n_images(&self) -> usize {
        self.per_image.len()
    }

    /// One JSON object per line.
    pub fn events_log(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_events(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.events_log())
    }

    /// Same result with timing stripped, for determinism comparisons.
    pub fn without_timing(&self) -> RunResult {
        let mut r = self.clone();
        r.wall_time = 0.0;
        r.events.clear();
        r
    }
}

pub fn parse_events_log(text: &str) -> Result<Vec<StageEvent>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{stage} stage aborted at image {image_index} ({image_id}): {source}")]
    Unavailable {
        stage: Stage,
        image_index: usize,
        image_id: String,
        #[source]
        source: BackendError,
    },
    #[error("image {image_id}: cannot load pixels: {reason}")]
    Pixels { image_id: String, reason: String },
}

impl From<BackendError> for RunError {
    fn from(e: BackendError) -> Self {
        RunError::Config(e.to_string())
    }
}

/// Built backends for one run configuration.
#[derive(Clone)]
pub struct Backends {
    pub localizer: Arc<dyn Localizer>,
    pub extractor: Extractor,
    pub analyzer: Arc<dyn ChatModel>,
    /// Chat extractor for hybrid re-checks.
    pub verifier: Option<Arc<dyn ChatModel>>,
}

impl Backends {
    pub fn from_registry(registry: &Registry, config: &RunConfig) -> Result<Self, BackendError> {
        let verifier = match &config.verifier_id {
            Some(id) => match registry.extractor(id)? {
                Extractor::Chat(c) => Some(c),
                Extractor::Dedicated(_) => {
                    return Err(BackendError::Config(format!("verifier `{id}` must be a chat-completion extractor")))
                }
            },
            None => None,
        };
        Ok(Self {
            localizer: registry.localizer(&config.localizer_id)?,
            extractor: registry.extractor(&config.extractor_id)?,
            analyzer: registry.analyzer(&config.analyzer_id)?,
            verifier,
        })
    }
}

/// A validated run configuration with its backends.
#[derive(Clone)]
pub struct Pipeline {
    config: RunConfig,
    backends: Backends,
    base_dir: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(config: RunConfig, backends: Backends) -> Result<Self, RunError> {
        config.validate().map_err(RunError::Config)?;
        match (config.setup, &backends.extractor) {
            (Setup::A, Extractor::Chat(_)) => {
                return Err(RunError::Config(format!(
                    "setup A needs a dedicated extractor, `{}` is chat-completion",
                    backends.extractor.id()
                )))
            }
            (Setup::B, Extractor::Dedicated(_)) => {
                return Err(RunError::Config(format!(
                    "setup B needs a chat-completion extractor, `{}` is dedicated",
                    backends.extractor.id()
                )))
            }
            _ => {}
        }
        Ok(Self { config, backends, base_dir: None })
    }

    pub fn from_registry(registry: &Registry, config: RunConfig) -> Result<Self, RunError> {
        let backends = Backends::from_registry(registry, &config)?;
        Self::new(config, backends)
    }

    /// Directory that relative `pixel_path`s resolve against.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run(&self, manifest: &DatasetManifest, run_index: u32) -> Result<RunResult, RunError> {
        Run::new(self, manifest, run_index, None).execute()
    }

    pub fn run_repeated(&self, manifest: &DatasetManifest) -> Result<Vec<RunResult>, RunError> {
        (0..self.config.repeats).map(|k| self.run(manifest, k)).collect()
    }

    /// Setup A, then crops whose OCR confidence is below `threshold` are
    /// re-extracted by the verifier. A failed OCR call counts as confidence 0.
    pub fn run_hybrid(
        &self,
        manifest: &DatasetManifest,
        threshold: f64,
        run_index: u32,
    ) -> Result<RunResult, RunError> {
        if self.config.setup != Setup::A {
            return Err(RunError::Config("hybrid runs start from setup A".into()));
        }
        if self.backends.verifier.is_none() {
            return Err(RunError::Config("hybrid runs need a verifier_id".into()));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(RunError::Config(format!("confidence threshold {threshold} outside [0, 1]")));
        }
        Run::new(self, manifest, run_index, Some(threshold)).execute()
    }
}

pub fn run_pipeline(
    manifest: &DatasetManifest,
    config: &RunConfig,
    registry: &Registry,
) -> Result<RunResult, RunError> {
    Pipeline::from_registry(registry, config.clone())?.run(manifest, 0)
}

pub fn run_repeated(
    manifest: &DatasetManifest,
    config: &RunConfig,
    registry: &Registry,
) -> Result<Vec<RunResult>, RunError> {
    Pipeline::from_registry(registry, config.clone())?.run_repeated(manifest)
}

/// Scores extractors on the ground-truth crops of a manifest: each one runs
/// with the ground-truth localizer in the setup matching its call shape,
/// failed crops count as empty text. Ranked by ascending WER.
pub fn bench_ocr(
    manifest: &DatasetManifest,
    registry: &Registry,
    extractor_ids: &[String],
    seed: u64,
    base_dir: Option<&Path>,
) -> Result<Vec<OcrScore>, RunError> {
    let mut scores = Vec::with_capacity(extractor_ids.len());
    for id in extractor_ids {
        let setup = match registry.extractor(id)? {
            Extractor::Dedicated(_) => Setup::A,
            Extractor::Chat(_) => Setup::B,
        };
        let config = RunConfig::new(setup, "ground-truth", id, "rule-based").with_seed(seed);
        let mut pipeline = Pipeline::from_registry(registry, config)?;
        if let Some(dir) = base_dir {
            pipeline = pipeline.with_base_dir(dir);
        }
        let result = pipeline.run(manifest, 0)?;
        let text = wer_cer(
            &extraction_pairs(manifest, &result, MatchCriterion::ById).map_err(|e| RunError::Config(e.to_string()))?,
        );
        scores.push(OcrScore {
            model: id.clone(),
            wer: text.wer,
            cer: text.cer,
            failures: result.per_image.iter().map(|i| i.missing.len() as u64).sum(),
            skipped: text.skipped as u64,
        });
    }
    Ok(rank_ocr(scores))
}

pub fn run_hybrid(
    manifest: &DatasetManifest,
    config: &RunConfig,
    registry: &Registry,
    threshold: f64,
) -> Result<RunResult, RunError> {
    Pipeline::from_registry(registry, config.clone())?.run_hybrid(manifest, threshold, 0)
}

/// Per-crop state between stages.
struct CropSlot {
    crop: LocalizedCrop,
    extraction: Option<CropExtraction>,
    /// Dedicated-OCR confidence; 0 when the call failed.
    confidence: f64,
}

struct Run<'a> {
    pipeline: &'a Pipeline,
    manifest: &'a DatasetManifest,
    run_index: u32,
    run_seed: u64,
    hybrid: Option<f64>,
    start: Instant,
    events: Vec<StageEvent>,
}

impl<'a> Run<'a> {
    fn new(pipeline: &'a Pipeline, manifest: &'a DatasetManifest, run_index: u32, hybrid: Option<f64>) -> Self {
        Self {
            pipeline,
            manifest,
            run_index,
            run_seed: rng::run_seed(pipeline.config.seed, run_index),
            hybrid,
            start: Instant::now(),
            events: Vec::new(),
        }
    }

    fn ctx(&self, stage: Stage, image_id: &str, index: u64, round: u32) -> CallContext {
        CallContext {
            run_seed: self.run_seed,
            retry_limit: self.pipeline.config.retry_limit,
            call_key: rng::derive_seed(hash_str(image_id), &[stage.key(), index]),
            round,
        }
    }

    fn record(&mut self, stage: Stage, image_id: &str, kind: EventKind, latency: f64) {
        let seq = self.events.len() as u64;
        self.events.push(StageEvent {
            seq,
            stage,
            image_id: image_id.to_string(),
            kind,
            t_offset: self.start.elapsed().as_secs_f64(),
            latency,
        });
    }

    fn pixels(&self, record: &ImageRecord, needed: bool) -> Result<Option<Raster>, RunError> {
        if !needed {
            return Ok(None);
        }
        load_raster(record, self.pipeline.base_dir.as_deref())
            .map(Some)
            .map_err(|e| RunError::Pixels { image_id: record.image_id.clone(), reason: e.to_string() })
    }

    fn abort(stage: Stage, image_index: usize, record: &ImageRecord, source: BackendError) -> RunError {
        RunError::Unavailable { stage, image_index, image_id: record.image_id.clone(), source }
    }

    fn execute(mut self) -> Result<RunResult, RunError> {
        let records = &self.manifest.records;
        let mut slots = self.localize_all()?;
        match &self.pipeline.backends.extractor {
            Extractor::Dedicated(_) => self.extract_dedicated(&mut slots)?,
            Extractor::Chat(chat) => {
                let chat = chat.clone();
                self.extract_chat(&mut slots, chat.as_ref(), Stage::Extract, |_| true)?
            }
        }
        if let Some(threshold) = self.hybrid {
            let verifier = self.pipeline.backends.verifier.clone().expect("checked by run_hybrid");
            self.extract_chat(&mut slots, verifier.as_ref(), Stage::Verify, |s| s.confidence < threshold)?;
        }
        let mut per_image = Vec::with_capacity(records.len());
        for (index, (record, image_slots)) in records.iter().zip(slots).enumerate() {
            per_image.push(self.analyze_image(index, record, image_slots)?);
        }
        let wall_time = self.start.elapsed().as_secs_f64();
        Ok(RunResult {
            run_config: self.pipeline.config.clone(),
            run_index: self.run_index,
            run_seed: self.run_seed,
            per_image,
            wall_time,
            prompt_hash: prompt_hash().to_string(),
            hybrid_threshold: self.hybrid,
            events: self.events,
        })
    }

    fn localize_all(&mut self) -> Result<Vec<Vec<CropSlot>>, RunError> {
        let localizer = self.pipeline.backends.localizer.clone();
        let mut all = Vec::with_capacity(self.manifest.records.len());
        for (index, record) in self.manifest.records.iter().enumerate() {
            let pixels = self.pixels(record, localizer.needs_pixels())?;
            let ctx = self.ctx(Stage::Localize, &record.image_id, 0, 0);
            match localizer.localize(record, pixels.as_ref(), &ctx) {
                Ok(loc) => {
                    self.record(Stage::Localize, &record.image_id, EventKind::Ok, loc.latency_s);
                    let slots = loc
                        .crops
                        .into_iter()
                        .map(|crop| CropSlot { crop, extraction: None, confidence: 0.0 })
                        .collect();
                    all.push(slots);
                }
                Err(e @ BackendError::CallFailed { .. }) => {
                    tracing::warn!(image = %record.image_id, error = %e, "localization failed");
                    self.record(Stage::Localize, &record.image_id, EventKind::Failed, 0.0);
                    all.push(Vec::new());
                }
                Err(e) => return Err(Self::abort(Stage::Localize, index, record, e)),
            }
        }
        Ok(all)
    }

    fn extract_dedicated(&mut self, slots: &mut [Vec<CropSlot>]) -> Result<(), RunError> {
        let Extractor::Dedicated(ocr) = self.pipeline.backends.extractor.clone() else {
            unreachable!("dedicated extraction with a chat extractor");
        };
        for (index, record) in self.manifest.records.iter().enumerate() {
            if slots[index].is_empty() {
                continue;
            }
            let pixels = self.pixels(record, ocr.needs_pixels())?;
            for (crop_index, slot) in slots[index].iter_mut().enumerate() {
                let ctx = self.ctx(Stage::Extract, &record.image_id, crop_index as u64, 0);
                match ocr.extract(&slot.crop, pixels.as_ref(), &ctx) {
                    Ok(out) => {
                        self.record(Stage::Extract, &record.image_id, EventKind::Ok, out.latency_s);
                        slot.confidence = out.confidence;
                        slot.extraction = Some(CropExtraction {
                            image_id: record.image_id.clone(),
                            imprint_id: slot.crop.imprint_id,
                            bbox: slot.crop.bbox,
                            text: out.text,
                            backend_id: ocr.id().to_string(),
                            latency_s: out.latency_s,
                            confidence: Some(out.confidence),
                        });
                    }
                    Err(e @ BackendError::CallFailed { .. }) => {
                        tracing::warn!(image = %record.image_id, imprint = slot.crop.imprint_id, error = %e, "extraction failed");
                        self.record(Stage::Extract, &record.image_id, EventKind::Failed, 0.0);
                    }
                    Err(e) => return Err(Self::abort(Stage::Extract, index, record, e)),
                }
            }
        }
        Ok(())
    }

    /// Chunked chat extraction of the selected crops of every image. A chunk
    /// whose reply fails alignment is resubmitted once; after that, or after a
    /// failed call, its crops keep whatever extraction they had.
    fn extract_chat(
        &mut self,
        slots: &mut [Vec<CropSlot>],
        chat: &dyn ChatModel,
        stage: Stage,
        select: impl Fn(&CropSlot) -> bool,
    ) -> Result<(), RunError> {
        let chunk_size = self.pipeline.config.chunk_size.min(chat.max_crops_per_call()).max(1);
        for (index, record) in self.manifest.records.iter().enumerate() {
            let selected: Vec<usize> = (0..slots[index].len()).filter(|&i| select(&slots[index][i])).collect();
            if selected.is_empty() {
                continue;
            }
            let pixels = self.pixels(record, chat.needs_pixels())?;
            for (chunk_no, positions) in selected.chunks(chunk_size).enumerate() {
                let crops: Vec<LocalizedCrop> = positions.iter().map(|&i| slots[index][i].crop.clone()).collect();
                let chunk = Chunk { chunk_index: chunk_no, crop_refs: crops.iter().map(|c| c.crop_ref()).collect() };
                let images = match &pixels {
                    Some(raster) => crops
                        .iter()
                        .map(|c| png_data_url(&raster.crop(&c.bbox)))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| Self::abort(stage, index, record, e))?,
                    None => Vec::new(),
                };
                let request = ChatRequest {
                    system: None,
                    prompt: build_extraction_prompt(crops.len()),
                    images,
                    max_tokens: EXTRACT_MAX_TOKENS,
                    task: ChatTask::Extract { crops },
                };
                for round in 0..2 {
                    let ctx = self.ctx(stage, &record.image_id, chunk_no as u64, round);
                    let reply = match chat.complete(&request, &ctx) {
                        Ok(reply) => reply,
                        Err(e @ BackendError::CallFailed { .. }) => {
                            tracing::warn!(image = %record.image_id, chunk = chunk_no, error = %e, "extraction call failed");
                            self.record(stage, &record.image_id, EventKind::Failed, 0.0);
                            break;
                        }
                        Err(e) => return Err(Self::abort(stage, index, record, e)),
                    };
                    match align_extraction(&chunk, &reply.text) {
                        Ok(aligned) => {
                            self.record(stage, &record.image_id, EventKind::Ok, reply.latency_s);
                            let per_crop = reply.latency_s / positions.len() as f64;
                            for (&pos, a) in positions.iter().zip(aligned) {
                                let slot = &mut slots[index][pos];
                                slot.extraction = Some(CropExtraction {
                                    image_id: record.image_id.clone(),
                                    imprint_id: slot.crop.imprint_id,
                                    bbox: slot.crop.bbox,
                                    text: a.text,
                                    backend_id: chat.id().to_string(),
                                    latency_s: per_crop,
                                    confidence: None,
                                });
                            }
                            break;
                        }
                        Err(e) => {
                            tracing::warn!(image = %record.image_id, chunk = chunk_no, round, error = %e, "extraction reply rejected");
                            let kind = if round == 0 { EventKind::Retry } else { EventKind::Failed };
                            self.record(stage, &record.image_id, kind, reply.latency_s);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn analyze_image(
        &mut self,
        index: usize,
        record: &ImageRecord,
        slots: Vec<CropSlot>,
    ) -> Result<ImageResult, RunError> {
        let mut result = ImageResult { image_id: record.image_id.clone(), ..ImageResult::default() };
        for slot in slots {
            match slot.extraction {
                Some(e) => result.extractions.push(e),
                None => result.missing.push(slot.crop.imprint_id),
            }
        }
        let analyzer = self.pipeline.backends.analyzer.clone();
        let chunk_size = self.pipeline.config.chunk_size.min(analyzer.max_crops_per_call()).max(1);
        let refs: Vec<CropRef> = result
            .extractions
            .iter()
            .map(|e| CropRef { image_id: e.image_id.clone(), imprint_id: e.imprint_id })
            .collect();
        for chunk in chunk_crops(&refs, chunk_size) {
            let start = chunk.chunk_index * chunk_size;
            let texts: Vec<&str> =
                result.extractions[start..start + chunk.crop_refs.len()].iter().map(|e| e.text.as_str()).collect();
            let tagged = encode_tagged(&texts);
            let request = ChatRequest {
                system: None,
                prompt: build_analysis_prompt(&tagged),
                images: Vec::new(),
                max_tokens: ANALYZE_MAX_TOKENS,
                task: ChatTask::Analyze { tagged },
            };
            let sent: BTreeSet<u32> = (0..chunk.crop_refs.len() as u32).collect();
            let mut classified = false;
            for round in 0..2 {
                let ctx = self.ctx(Stage::Analyze, &record.image_id, chunk.chunk_index as u64, round);
                let reply = match analyzer.complete(&request, &ctx) {
                    Ok(reply) => reply,
                    Err(e @ BackendError::CallFailed { .. }) => {
                        tracing::warn!(image = %record.image_id, chunk = chunk.chunk_index, error = %e, "analysis call failed");
                        self.record(Stage::Analyze, &record.image_id, EventKind::Failed, 0.0);
                        break;
                    }
                    Err(e) => return Err(Self::abort(Stage::Analyze, index, record, e)),
                };
                match parse_analysis_response(&reply.text, &sent) {
                    Ok(parsed) => {
                        self.record(Stage::Analyze, &record.image_id, EventKind::Ok, reply.latency_s);
                        for item in parsed.response.results {
                            let crop = &chunk.crop_refs[item.id as usize];
                            result.verdicts.push(AnalysisVerdict {
                                image_id: crop.image_id.clone(),
                                imprint_id: crop.imprint_id,
                                term_index: 0,
                                is_phi: item.classification == Classification::Phi,
                                category: item.category,
                                rationale: item.rationale,
                            });
                        }
                        result
                            .unclassified
                            .extend(parsed.unclassified.iter().map(|&i| chunk.crop_refs[i as usize].imprint_id));
                        classified = true;
                        break;
                    }
                    Err(e) => {
                        tracing::warn!(image = %record.image_id, chunk = chunk.chunk_index, round, error = %e, "analysis reply rejected");
                        let kind = if round == 0 { EventKind::Retry } else { EventKind::Failed };
                        self.record(Stage::Analyze, &record.image_id, kind, reply.latency_s);
                    }
                }
            }
            if !classified {
                result.unclassified.extend(chunk.crop_refs.iter().map(|c| c.imprint_id));
            }
        }
        result.verdicts.sort_by_key(|v| v.imprint_id);
        result.unclassified.sort_unstable();
        Ok(result)
    }
}
