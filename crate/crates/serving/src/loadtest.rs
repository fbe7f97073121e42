//! Load test: concurrent clients submit jobs through the proxy and poll
//! until every job is terminal.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use deid_core::backends::sim::{LatencyModel, SimConfig};
use deid_core::backends::{BackendDescriptor, BackendKind, ExtractorApi, Registry};
use deid_core::dataset::{generate, GeneratorConfig};
use deid_core::{DatasetStyle, RunConfig, Setup};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscale::{spawn_autoscaler, AutoscalePolicy, ScaleSample};
use crate::des;
use crate::job::{JobPayload, JobStatus, JobView};
use crate::proxy::{start_proxy, AppState};
use crate::store::{JobStore, MemoryStore};
use crate::worker::{spawn_worker, JobSource, StoreSource, WorkerConfig};

/// Extractor id used by load-test payloads.
pub const LOAD_OCR: &str = "load-ocr";

/// Adds the load-test extractor: clean simulated OCR with the given
/// per-image latency.
pub fn with_load_backend(mut registry: Registry, image_latency: LatencyModel) -> Registry {
    registry.insert(BackendDescriptor::simulated(
        LOAD_OCR,
        BackendKind::Extractor,
        ExtractorApi::Dedicated,
        SimConfig::default().with_latency(image_latency),
    ));
    registry
}

#[derive(Debug, Error)]
pub enum LoadTestError {
    #[error("invalid load test: {0}")]
    Config(String),
    #[error("could not start the serving stack: {0}")]
    Startup(String),
}

#[derive(Debug, Clone)]
pub struct LoadTestConfig {
    pub requests: usize,
    pub images_per_request: usize,
    pub image_latency: LatencyModel,
    /// Worker concurrency of the in-process stack; the autoscaler's start
    /// value when autoscaling.
    pub concurrency: usize,
    pub seed: u64,
    pub poll_interval: Duration,
    pub autoscale: Option<AutoscalePolicy>,
    /// Drive an already running proxy instead of starting one.
    pub proxy_url: Option<String>,
    /// Give up on jobs that are not terminal after this long.
    pub deadline: Duration,
}

impl Default for LoadTestConfig {
    fn default() -> Self {
        Self {
            requests: 100,
            images_per_request: 10,
            image_latency: LatencyModel::fixed(0.1),
            concurrency: 8,
            seed: 0,
            poll_interval: Duration::from_millis(20),
            autoscale: None,
            proxy_url: None,
            deadline: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadTestReport {
    pub requests: usize,
    pub images_total: usize,
    /// Seconds from the first submission to the last terminal status.
    pub wall_time: f64,
    pub per_image: f64,
    pub latency_mean: f64,
    pub latency_std: f64,
    pub worker_concurrency: Option<usize>,
    pub done: usize,
    pub failures: Vec<String>,
    /// True when any request failed or timed out.
    pub degraded: bool,
    /// Mean request latency of the queueing reference fed with the observed
    /// arrival and execution times. In-process stack only.
    pub reference_latency_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub autoscale: Vec<ScaleSample>,
}

impl LoadTestReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} requests, {} images: total {:.2} s ({:.4} s/image), request latency {:.2} ± {:.2} s",
            self.requests, self.images_total, self.wall_time, self.per_image, self.latency_mean, self.latency_std
        );
        if let Some(c) = self.worker_concurrency {
            s.push_str(&format!(", concurrency {c}"));
        }
        if let Some(r) = self.reference_latency_mean {
            s.push_str(&format!(", reference latency {r:.2} s"));
        }
        if self.degraded {
            s.push_str(&format!(", DEGRADED: {} of {} requests failed", self.failures.len(), self.requests));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut out =
            String::from("| Requests | Images | Total (s) | s/image | Latency mean (s) | Latency std (s) |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        out.push_str(&format!(
            "| {} | {} | {:.2} | {:.4} | {:.2} | {:.2} |\n",
            self.requests, self.images_total, self.wall_time, self.per_image, self.latency_mean, self.latency_std
        ));
        if self.degraded {
            out.push_str(&format!("\nDegraded run: {} failed requests.\n", self.failures.len()));
            for f in &self.failures {
                out.push_str(&format!("- {f}\n"));
            }
        }
        out
    }
}

/// Payloads of the synthetic workload: one imprint per image, so each
/// image costs exactly one extractor call.
pub fn workload(cfg: &LoadTestConfig) -> Result<Vec<JobPayload>, LoadTestError> {
    if cfg.requests == 0 || cfg.images_per_request == 0 {
        return Err(LoadTestError::Config("requests and images_per_request must be positive".into()));
    }
    let mut gen = GeneratorConfig::for_style(DatasetStyle::RadphiLike, cfg.requests * cfg.images_per_request, cfg.seed);
    gen.max_imprints = 1;
    gen.render_pixels = false;
    let manifest = generate(&gen).map_err(|e| LoadTestError::Config(e.to_string()))?;
    let run_config = RunConfig::new(Setup::A, "ground-truth", LOAD_OCR, "rule-based").with_seed(cfg.seed);
    Ok(manifest
        .records
        .chunks(cfg.images_per_request)
        .map(|chunk| JobPayload::inline(chunk.to_vec(), run_config.clone()))
        .collect())
}

struct Outcome {
    submitted: f64,
    /// When the proxy acknowledged the job, if it did.
    accepted: Option<f64>,
    /// Execution time recorded by the store.
    service: Option<f64>,
    latency: f64,
    error: Option<String>,
}

async fn drive(
    client: reqwest::Client,
    base: String,
    payload: JobPayload,
    poll: Duration,
    deadline: Instant,
    accepted: &mut Option<Instant>,
) -> Result<JobView, String> {
    let resp = client.post(format!("{base}/jobs")).json(&payload).send().await.map_err(|e| e.to_string())?;
    if !resp.status().is_success() {
        let status = resp.status();
        return Err(format!("submit rejected with {status}: {}", resp.text().await.unwrap_or_default()));
    }
    let body: serde_json::Value = resp.json().await.map_err(|e| e.to_string())?;
    let id = body["job_id"].as_str().ok_or("submit reply has no job_id")?.to_string();
    *accepted = Some(Instant::now());
    loop {
        tokio::time::sleep(poll).await;
        if Instant::now() > deadline {
            return Err(format!("job {id} not finished before the deadline"));
        }
        // transient errors are tolerated: the proxy may be restarting
        let Ok(resp) = client.get(format!("{base}/jobs/{id}")).send().await else { continue };
        let Ok(view) = resp.json::<JobView>().await else { continue };
        match view.status {
            JobStatus::Done => return Ok(view),
            JobStatus::Failed { reason } => return Err(format!("job {id} failed: {reason}")),
            _ => {}
        }
    }
}

/// Runs the load test. Without `proxy_url` an in-process stack is started
/// (memory store, proxy on a loopback port, one worker).
pub async fn run_load_test(cfg: &LoadTestConfig) -> Result<LoadTestReport, LoadTestError> {
    let payloads = workload(cfg)?;
    if cfg.concurrency == 0 {
        return Err(LoadTestError::Config("concurrency must be positive".into()));
    }

    let mut stack = None;
    let base = match &cfg.proxy_url {
        Some(url) => url.trim_end_matches('/').to_string(),
        None => {
            let store: Arc<dyn JobStore> = Arc::new(MemoryStore::new());
            let registry = Arc::new(with_load_backend(Registry::builtin(), cfg.image_latency));
            let state = AppState { store: store.clone(), registry: registry.clone() };
            let proxy = start_proxy(state, SocketAddr::from(([127, 0, 0, 1], 0)))
                .await
                .map_err(|e| LoadTestError::Startup(e.to_string()))?;
            let source: Arc<dyn JobSource> = Arc::new(StoreSource(store));
            let worker = spawn_worker(source.clone(), registry, WorkerConfig::new(cfg.concurrency));
            let scaler = cfg.autoscale.map(|p| spawn_autoscaler(source, worker.limit.clone(), p));
            let url = proxy.url();
            stack = Some((proxy, worker, scaler));
            url
        }
    };

    // independent clients, built up front so setup cost stays out of the timing
    let clients: Vec<reqwest::Client> = payloads.iter().map(|_| reqwest::Client::new()).collect();
    let start = Instant::now();
    let deadline = start + cfg.deadline;
    let mut tasks = tokio::task::JoinSet::new();
    for (payload, client) in payloads.into_iter().zip(clients) {
        let base = base.clone();
        let poll = cfg.poll_interval;
        tasks.spawn(async move {
            let submitted = start.elapsed().as_secs_f64();
            let mut accepted = None;
            let outcome = drive(client, base, payload, poll, deadline, &mut accepted).await;
            let latency = start.elapsed().as_secs_f64() - submitted;
            let accepted = accepted.map(|t| (t - start).as_secs_f64());
            match outcome {
                Ok(view) => {
                    let service =
                        view.started_at.zip(view.finished_at).map(|(s, f)| f.saturating_sub(s) as f64 / 1000.0);
                    Outcome { submitted, accepted, service, latency, error: None }
                }
                Err(e) => Outcome { submitted, accepted, service: None, latency, error: Some(e) },
            }
        });
    }
    let mut outcomes = Vec::with_capacity(cfg.requests);
    while let Some(joined) = tasks.join_next().await {
        outcomes.push(joined.unwrap_or_else(|e| Outcome {
            submitted: 0.0,
            accepted: None,
            service: None,
            latency: 0.0,
            error: Some(e.to_string()),
        }));
    }
    let wall_time = start.elapsed().as_secs_f64();

    let mut samples = Vec::new();
    let mut worker_concurrency = None;
    if let Some((proxy, worker, scaler)) = stack {
        if let Some(s) = scaler {
            samples = s.shutdown().await;
        } else {
            worker_concurrency = Some(cfg.concurrency);
        }
        worker.shutdown().await;
        if let Err(e) = proxy.shutdown().await {
            tracing::warn!(error = %e, "proxy shutdown failed");
        }
    }

    let latencies: Vec<f64> = outcomes.iter().map(|o| o.latency).collect();
    let n = latencies.len().max(1) as f64;
    let latency_mean = latencies.iter().sum::<f64>() / n;
    let latency_std = (latencies.iter().map(|l| (l - latency_mean).powi(2)).sum::<f64>() / n).sqrt();
    let failures: Vec<String> = outcomes.iter().filter_map(|o| o.error.clone()).collect();
    let images_total = cfg.requests * cfg.images_per_request;

    // queueing reference: jobs enter the queue when the proxy acknowledges
    // them and occupy a server for their recorded execution time; the submit
    // round trip is added back per request
    let reference_latency_mean = worker_concurrency.filter(|_| failures.is_empty()).map(|c| {
        let arrivals: Vec<f64> = outcomes.iter().map(|o| o.accepted.unwrap_or(o.submitted)).collect();
        let nominal = cfg.images_per_request as f64 * cfg.image_latency.mean;
        let services: Vec<f64> = outcomes.iter().map(|o| o.service.unwrap_or(nominal)).collect();
        let timings = des::simulate(&arrivals, &services, c);
        let handshake: f64 = outcomes.iter().zip(&arrivals).map(|(o, a)| a - o.submitted).sum();
        des::mean_response(&timings) + handshake / outcomes.len() as f64
    });

    let report = LoadTestReport {
        requests: cfg.requests,
        images_total,
        wall_time,
        per_image: wall_time / images_total as f64,
        latency_mean,
        latency_std,
        worker_concurrency,
        done: outcomes.len() - failures.len(),
        degraded: !failures.is_empty(),
        failures,
        reference_latency_mean,
        autoscale: samples,
    };
    tracing::info!(summary = %report.summary(), "load test finished");
    Ok(report)
}
