//! Job records and the legal status transitions.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use deid_core::backends::Registry;
use deid_core::dataset::{DatasetCounts, DatasetManifest, GeneratorConfig};
use deid_core::orchestrator::{Pipeline, RunResult};
use deid_core::{validate_image, DatasetStyle, ImageRecord, MetricsReport, RunConfig};
use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed { reason: String },
}

impl JobStatus {
    pub fn kind(&self) -> StatusKind {
        match self {
            JobStatus::Pending => StatusKind::Pending,
            JobStatus::Running => StatusKind::Running,
            JobStatus::Done => StatusKind::Done,
            JobStatus::Failed { .. } => StatusKind::Failed,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusKind {
    Pending,
    Running,
    Done,
    Failed,
}

impl StatusKind {
    /// Pending -> Running -> Done | Failed, nothing else.
    pub fn can_become(self, next: StatusKind) -> bool {
        matches!(
            (self, next),
            (StatusKind::Pending, StatusKind::Running)
                | (StatusKind::Running, StatusKind::Done)
                | (StatusKind::Running, StatusKind::Failed)
        )
    }
}

impl fmt::Display for StatusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatusKind::Pending => "pending",
            StatusKind::Running => "running",
            StatusKind::Done => "done",
            StatusKind::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub status: StatusKind,
    pub at_ms: u64,
}

/// Whether a persisted history only ever moves forward along legal edges
/// with non-decreasing timestamps.
pub fn history_is_legal(history: &[Transition]) -> bool {
    history.first().is_some_and(|t| t.status == StatusKind::Pending)
        && history.windows(2).all(|w| w[0].status.can_become(w[1].status) && w[0].at_ms <= w[1].at_ms)
}

/// What a client submits: the images to process and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobPayload {
    /// Inline image records.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRecord>,
    /// Path of a manifest readable by the workers, instead of inline images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_path: Option<String>,
    pub config: RunConfig,
}

impl JobPayload {
    pub fn inline(images: Vec<ImageRecord>, config: RunConfig) -> Self {
        Self { images, manifest_path: None, config }
    }

    /// Checks shape, image records and that every backend exists and fits
    /// the setup.
    pub fn validate(&self, registry: &Registry) -> Result<(), String> {
        match (self.images.is_empty(), &self.manifest_path) {
            (true, None) => return Err("payload has neither images nor manifest_path".into()),
            (false, Some(_)) => return Err("payload has both images and manifest_path".into()),
            _ => {}
        }
        for image in &self.images {
            if let Some(v) = validate_image(image).first() {
                return Err(format!("image {}: {}: {}", image.image_id, v.field, v.rule));
            }
        }
        Pipeline::from_registry(registry, self.config.clone()).map(|_| ()).map_err(|e| e.to_string())
    }

    /// Inline images wrapped as a manifest.
    pub fn inline_manifest(&self) -> DatasetManifest {
        let style = self.images.first().map(|i| i.style).unwrap_or(DatasetStyle::RadphiLike);
        DatasetManifest {
            dataset_id: "inline".into(),
            generator: GeneratorConfig::for_style(style, self.images.len(), 0),
            counts: DatasetCounts::from_records(&self.images),
            records: self.images.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub run: RunResult,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub payload: JobPayload,
    pub status: JobStatus,
    pub submitted_at: u64,
    #[serde(default)]
    pub started_at: Option<u64>,
    #[serde(default)]
    pub finished_at: Option<u64>,
    #[serde(default)]
    pub result: Option<JobResult>,
    /// Number of claims, including reclaims after an expired lease.
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub lease: Option<Lease>,
    #[serde(default)]
    pub history: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub token: u64,
    pub worker_id: String,
    pub expires_at: u64,
}

impl JobRecord {
    pub fn new(job_id: String, payload: JobPayload) -> Self {
        let at_ms = now_ms();
        Self {
            job_id,
            payload,
            status: JobStatus::Pending,
            submitted_at: at_ms,
            started_at: None,
            finished_at: None,
            result: None,
            attempts: 0,
            lease: None,
            history: vec![Transition { status: StatusKind::Pending, at_ms }],
        }
    }

    /// Status with timestamps, without payload or result.
    pub fn view(&self) -> JobView {
        JobView {
            job_id: self.job_id.clone(),
            status: self.status.clone(),
            submitted_at: self.submitted_at,
            started_at: self.started_at,
            finished_at: self.finished_at,
            attempts: self.attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub status: JobStatus,
    pub submitted_at: u64,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
    pub attempts: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_forward_edges_are_legal() {
        use StatusKind::*;
        let all = [Pending, Running, Done, Failed];
        let legal: Vec<_> =
            all.iter().flat_map(|a| all.iter().map(move |b| (*a, *b))).filter(|(a, b)| a.can_become(*b)).collect();
        assert_eq!(legal, vec![(Pending, Running), (Running, Done), (Running, Failed)]);
    }

    #[test]
    fn history_checks() {
        let t = |status, at_ms| Transition { status, at_ms };
        assert!(history_is_legal(&[t(StatusKind::Pending, 1), t(StatusKind::Running, 2), t(StatusKind::Done, 2)]));
        assert!(!history_is_legal(&[t(StatusKind::Pending, 1), t(StatusKind::Done, 2)]));
        assert!(!history_is_legal(&[t(StatusKind::Pending, 3), t(StatusKind::Running, 2)]));
        assert!(!history_is_legal(&[]));
    }

    #[test]
    fn payload_validation_names_the_backend() {
        let reg = Registry::builtin();
        let cfg = RunConfig::new(deid_core::Setup::A, "ground-truth", "no-such-ocr", "rule-based");
        let m = deid_core::dataset::generate(&GeneratorConfig::for_style(DatasetStyle::RadphiLike, 2, 1)).unwrap();
        let err = JobPayload::inline(m.records.clone(), cfg).validate(&reg).unwrap_err();
        assert!(err.contains("no-such-ocr"), "{err}");
        let empty =
            JobPayload::inline(vec![], RunConfig::new(deid_core::Setup::A, "ground-truth", "sim-ocr", "rule-based"));
        assert!(empty.validate(&reg).is_err());
    }
}
