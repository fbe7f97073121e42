//! Inference workers: claim jobs, run the pipeline, report results.
//!
//! A worker keeps at most `limit` jobs in flight. The limit is shared with
//! the autoscaler and may change at any time; lowering it never cancels
//! running jobs, it only stops new claims until the count falls below it.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use deid_core::backends::Registry;
use deid_core::dataset::load_manifest;
use deid_core::metrics::{evaluate_run, MatchCriterion};
use deid_core::orchestrator::Pipeline;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{watch, Notify};
use tokio::task::JoinSet;

use crate::job::{JobRecord, JobResult};
use crate::store::{Claim, JobStore, StoreCounts, StoreError};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum SourceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("job source unreachable: {0}")]
    Unreachable(String),
}

/// Where a worker gets jobs from and reports outcomes to.
#[async_trait]
pub trait JobSource: Send + Sync {
    async fn claim(&self, worker_id: &str, lease: Duration) -> Result<Option<Claim>, SourceError>;
    async fn heartbeat(&self, job_id: &str, token: u64, lease: Duration) -> Result<(), SourceError>;
    async fn complete(&self, job_id: &str, token: u64, result: JobResult) -> Result<(), SourceError>;
    async fn fail(&self, job_id: &str, token: u64, reason: &str) -> Result<(), SourceError>;
    async fn counts(&self) -> Result<StoreCounts, SourceError>;
}

/// Direct access to a store in the same process.
#[derive(Clone)]
pub struct StoreSource(pub Arc<dyn JobStore>);

#[async_trait]
impl JobSource for StoreSource {
    async fn claim(&self, worker_id: &str, lease: Duration) -> Result<Option<Claim>, SourceError> {
        Ok(self.0.claim(worker_id, lease)?)
    }

    async fn heartbeat(&self, job_id: &str, token: u64, lease: Duration) -> Result<(), SourceError> {
        Ok(self.0.heartbeat(job_id, token, lease)?)
    }

    async fn complete(&self, job_id: &str, token: u64, result: JobResult) -> Result<(), SourceError> {
        Ok(self.0.complete(job_id, token, result)?)
    }

    async fn fail(&self, job_id: &str, token: u64, reason: &str) -> Result<(), SourceError> {
        Ok(self.0.fail(job_id, token, reason)?)
    }

    async fn counts(&self) -> Result<StoreCounts, SourceError> {
        Ok(self.0.counts()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub worker_id: String,
    pub lease_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaseRequest {
    pub token: u64,
    pub lease_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub token: u64,
    pub result: JobResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailRequest {
    pub token: u64,
    pub reason: String,
}

/// Store access through the proxy's internal endpoints.
#[derive(Clone)]
pub struct HttpSource {
    base: String,
    client: reqwest::Client,
}

impl HttpSource {
    pub fn new(base_url: &str) -> Self {
        Self { base: base_url.trim_end_matches('/').to_string(), client: reqwest::Client::new() }
    }

    async fn post<T: Serialize + ?Sized>(&self, path: &str, body: &T) -> Result<reqwest::Response, SourceError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(|e| SourceError::Unreachable(e.to_string()))?;
        Self::check(resp).await
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, SourceError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body: serde_json::Value = resp.json().await.unwrap_or_default();
        let message = body["error"].as_str().unwrap_or("").to_string();
        Err(match status.as_u16() {
            404 => SourceError::Store(StoreError::NotFound(message)),
            409 => SourceError::Store(StoreError::Conflict {
                id: body["job_id"].as_str().unwrap_or("").to_string(),
                status: serde_json::from_value(body["status"].clone()).unwrap_or(crate::job::StatusKind::Running),
                reason: message,
            }),
            _ => SourceError::Unreachable(format!("HTTP {status}: {message}")),
        })
    }
}

#[async_trait]
impl JobSource for HttpSource {
    async fn claim(&self, worker_id: &str, lease: Duration) -> Result<Option<Claim>, SourceError> {
        let req = ClaimRequest { worker_id: worker_id.to_string(), lease_ms: lease.as_millis() as u64 };
        let resp = self.post("/internal/claim", &req).await?;
        if resp.status() == reqwest::StatusCode::NO_CONTENT {
            return Ok(None);
        }
        resp.json().await.map(Some).map_err(|e| SourceError::Unreachable(e.to_string()))
    }

    async fn heartbeat(&self, job_id: &str, token: u64, lease: Duration) -> Result<(), SourceError> {
        let req = LeaseRequest { token, lease_ms: lease.as_millis() as u64 };
        self.post(&format!("/internal/jobs/{job_id}/heartbeat"), &req).await.map(|_| ())
    }

    async fn complete(&self, job_id: &str, token: u64, result: JobResult) -> Result<(), SourceError> {
        self.post(&format!("/internal/jobs/{job_id}/complete"), &CompleteRequest { token, result }).await.map(|_| ())
    }

    async fn fail(&self, job_id: &str, token: u64, reason: &str) -> Result<(), SourceError> {
        let req = FailRequest { token, reason: reason.to_string() };
        self.post(&format!("/internal/jobs/{job_id}/fail"), &req).await.map(|_| ())
    }

    async fn counts(&self) -> Result<StoreCounts, SourceError> {
        let resp = self
            .client
            .get(format!("{}/internal/stats", self.base))
            .send()
            .await
            .map_err(|e| SourceError::Unreachable(e.to_string()))?;
        Self::check(resp).await?.json().await.map_err(|e| SourceError::Unreachable(e.to_string()))
    }
}

/// Fault to inject into one job attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The job's execution panics.
    Panic,
    /// The worker drops the job silently, as if its process died.
    Crash,
}

/// Decides per (job, attempt) whether to inject a fault. Test hook.
pub type FaultPlan = Arc<dyn Fn(&JobRecord, u32) -> Option<Fault> + Send + Sync>;

#[derive(Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub concurrency: usize,
    pub lease: Duration,
    /// Sleep between claim attempts when nothing is claimable.
    pub idle_poll: Duration,
    /// Directory that relative manifest paths and pixel paths resolve against.
    pub base_dir: Option<std::path::PathBuf>,
    pub faults: Option<FaultPlan>,
}

impl WorkerConfig {
    pub fn new(concurrency: usize) -> Self {
        Self {
            worker_id: format!("worker-{}", uuid::Uuid::new_v4()),
            concurrency,
            lease: DEFAULT_LEASE,
            idle_poll: Duration::from_millis(5),
            base_dir: None,
            faults: None,
        }
    }
}

/// Running worker; dropping the handle does not stop it, call `shutdown`.
pub struct WorkerHandle {
    pub limit: Arc<AtomicUsize>,
    in_flight: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    stop: watch::Sender<bool>,
    join: tokio::task::JoinHandle<()>,
}

impl WorkerHandle {
    pub fn set_concurrency(&self, n: usize) {
        self.limit.store(n.max(1), Ordering::SeqCst);
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously executing jobs seen so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Stops claiming and waits for in-flight jobs to finish.
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.join.await;
    }
}

/// Runs one job payload to a result; errors become the Failed reason.
pub fn execute(job: &JobRecord, registry: &Registry, base_dir: Option<&Path>) -> Result<JobResult, String> {
    let manifest = match &job.payload.manifest_path {
        Some(p) => {
            let path = match base_dir {
                Some(dir) => dir.join(p),
                None => p.into(),
            };
            load_manifest(&path).map_err(|e| e.to_string())?
        }
        None => job.payload.inline_manifest(),
    };
    let mut pipeline = Pipeline::from_registry(registry, job.payload.config.clone()).map_err(|e| e.to_string())?;
    if let Some(dir) = base_dir {
        pipeline = pipeline.with_base_dir(dir);
    }
    let run = pipeline.run(&manifest, 0).map_err(|e| e.to_string())?;
    let metrics = evaluate_run(&manifest, &run, MatchCriterion::ById).map_err(|e| e.to_string())?;
    Ok(JobResult { run, metrics })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

pub fn spawn_worker(source: Arc<dyn JobSource>, registry: Arc<Registry>, config: WorkerConfig) -> WorkerHandle {
    let limit = Arc::new(AtomicUsize::new(config.concurrency.max(1)));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (stop, stop_rx) = watch::channel(false);
    let join =
        tokio::spawn(worker_loop(source, registry, config, limit.clone(), in_flight.clone(), peak.clone(), stop_rx));
    WorkerHandle { limit, in_flight, peak, stop, join }
}

async fn worker_loop(
    source: Arc<dyn JobSource>,
    registry: Arc<Registry>,
    config: WorkerConfig,
    limit: Arc<AtomicUsize>,
    in_flight: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    mut stop: watch::Receiver<bool>,
) {
    let freed = Arc::new(Notify::new());
    let mut tasks = JoinSet::new();
    let mut backoff = config.idle_poll;
    loop {
        if *stop.borrow() {
            break;
        }
        while tasks.try_join_next().is_some() {}
        if in_flight.load(Ordering::SeqCst) >= limit.load(Ordering::SeqCst) {
            tokio::select! {
                _ = freed.notified() => {}
                _ = tokio::time::sleep(Duration::from_millis(50)) => {}
                _ = stop.changed() => {}
            }
            continue;
        }
        match source.claim(&config.worker_id, config.lease).await {
            Ok(Some(claim)) => {
                backoff = config.idle_poll;
                let n = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(n, Ordering::SeqCst);
                let job = JobTask { source: source.clone(), registry: registry.clone(), config: config.clone(), claim };
                let in_flight = in_flight.clone();
                let freed = freed.clone();
                tasks.spawn(async move {
                    job.run().await;
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                    freed.notify_one();
                });
            }
            Ok(None) => {
                tokio::select! {
                    _ = tokio::time::sleep(config.idle_poll) => {}
                    _ = stop.changed() => {}
                }
            }
            Err(e) => {
                tracing::warn!(worker = %config.worker_id, error = %e, "claim failed, backing off");
                tokio::select! {
                    _ = tokio::time::sleep(backoff) => {}
                    _ = stop.changed() => {}
                }
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
        }
    }
    while tasks.join_next().await.is_some() {}
}

struct JobTask {
    source: Arc<dyn JobSource>,
    registry: Arc<Registry>,
    config: WorkerConfig,
    claim: Claim,
}

impl JobTask {
    async fn run(self) {
        let Claim { job, token } = self.claim;
        let id = job.job_id.clone();
        let fault = self.config.faults.as_ref().and_then(|plan| plan(&job, job.attempts));
        if fault == Some(Fault::Crash) {
            tracing::warn!(job = %id, "injected crash: abandoning job");
            return;
        }
        let registry = self.registry.clone();
        let base_dir = self.config.base_dir.clone();
        let mut work = tokio::task::spawn_blocking(move || {
            if fault == Some(Fault::Panic) {
                panic!("injected panic in job {}", job.job_id);
            }
            execute(&job, &registry, base_dir.as_deref())
        });
        let beat = (self.config.lease / 3).max(Duration::from_millis(10));
        let outcome = loop {
            tokio::select! {
                joined = &mut work => break joined,
                _ = tokio::time::sleep(beat) => {
                    if let Err(e) = self.source.heartbeat(&id, token, self.config.lease).await {
                        tracing::warn!(job = %id, error = %e, "heartbeat rejected");
                    }
                }
            }
        };
        let outcome = match outcome {
            Ok(r) => r,
            Err(e) if e.is_panic() => Err(format!("worker panic: {}", panic_message(e.into_panic()))),
            Err(e) => Err(format!("job task aborted: {e}")),
        };
        // the proxy may be restarting; keep trying while the lease is still ours
        let mut delay = Duration::from_millis(20);
        for _ in 0..10 {
            let reported = match &outcome {
                Ok(result) => self.source.complete(&id, token, result.clone()).await,
                Err(reason) => self.source.fail(&id, token, reason).await,
            };
            match reported {
                Ok(()) => return,
                Err(SourceError::Unreachable(e)) => {
                    tracing::warn!(job = %id, error = %e, "job source unreachable, retrying report");
                    tokio::time::sleep(delay).await;
                    delay = (delay * 2).min(Duration::from_secs(2));
                }
                Err(e) => {
                    tracing::warn!(job = %id, error = %e, "job outcome rejected");
                    return;
                }
            }
        }
    }
}
