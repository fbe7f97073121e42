use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use deid_core::backends::sim::LatencyModel;
use deid_core::backends::Registry;
use deid_core::dataset::{generate, GeneratorConfig};
use deid_core::{DatasetStyle, RunConfig, Setup};
use deid_serving::loadtest::{with_load_backend, LOAD_OCR};
use deid_serving::{
    spawn_worker, start_proxy, AppState, FileStore, HttpSource, JobPayload, JobStore, JobView, MemoryStore,
    StoreSource, WorkerConfig,
};
use serde_json::{json, Value};

fn payload(n: usize, seed: u64, extractor: &str) -> JobPayload {
    let mut gen = GeneratorConfig::for_style(DatasetStyle::RadphiLike, n, seed);
    gen.max_imprints = 1;
    let m = generate(&gen).unwrap();
    JobPayload::inline(m.records, RunConfig::new(Setup::A, "ground-truth", extractor, "rule-based"))
}

fn registry(latency: f64) -> Arc<Registry> {
    Arc::new(with_load_backend(Registry::builtin(), LatencyModel::fixed(latency)))
}

fn local() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

async fn submit(client: &reqwest::Client, base: &str, body: &impl serde::Serialize) -> (u16, Value) {
    let resp = client.post(format!("{base}/jobs")).json(body).send().await.unwrap();
    (resp.status().as_u16(), resp.json().await.unwrap_or(Value::Null))
}

async fn wait_terminal(client: &reqwest::Client, base: &str, id: &str, limit: Duration) -> JobView {
    let deadline = Instant::now() + limit;
    loop {
        if let Ok(resp) = client.get(format!("{base}/jobs/{id}")).send().await {
            if let Ok(view) = resp.json::<JobView>().await {
                if view.status.is_terminal() {
                    return view;
                }
            }
        }
        assert!(Instant::now() < deadline, "job {id} did not finish in time");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn submit_status_result_and_errors() {
    let store: Arc<dyn JobStore> = Arc::new(MemoryStore::new());
    let reg = registry(0.05);
    let proxy = start_proxy(AppState { store: store.clone(), registry: reg.clone() }, local()).await.unwrap();
    let base = proxy.url();
    let client = reqwest::Client::new();

    assert_eq!(client.get(format!("{base}/healthz")).send().await.unwrap().status(), 200);

    let (code, body) = submit(&client, &base, &payload(10, 1, LOAD_OCR)).await;
    assert_eq!(code, 202);
    assert_eq!(body["status"]["state"], "pending");
    let id = body["job_id"].as_str().unwrap().to_string();

    // no worker yet: the result is not ready and the status says why
    let resp = client.get(format!("{base}/jobs/{id}/result")).send().await.unwrap();
    assert_eq!(resp.status(), 409);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["status"]["state"], "pending");

    let resp = client.get(format!("{base}/jobs/nope")).send().await.unwrap();
    assert_eq!(resp.status(), 404);
    let resp = client.get(format!("{base}/jobs/nope/result")).send().await.unwrap();
    assert_eq!(resp.status(), 404);

    let mut bad = serde_json::to_value(payload(2, 1, "sim-ocr")).unwrap();
    bad["config"]["extractor_id"] = json!("tesseract-9000");
    let (code, body) = submit(&client, &base, &bad).await;
    assert_eq!(code, 400);
    assert!(body["error"].as_str().unwrap().contains("tesseract-9000"), "{body}");

    let (code, _) = submit(&client, &base, &json!({"images": "nope"})).await;
    assert_eq!(code, 400);

    let worker = spawn_worker(Arc::new(StoreSource(store.clone())), reg, WorkerConfig::new(2));
    let view = wait_terminal(&client, &base, &id, Duration::from_secs(20)).await;
    assert_eq!(view.status, deid_serving::JobStatus::Done);
    assert!(view.started_at.unwrap() >= view.submitted_at);
    assert!(view.finished_at.unwrap() >= view.started_at.unwrap());

    let resp = client.get(format!("{base}/jobs/{id}/result")).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let result: Value = resp.json().await.unwrap();
    assert_eq!(result["run"]["per_image"].as_array().unwrap().len(), 10);
    assert_eq!(result["metrics"]["precision"], 1.0);
    assert_eq!(result["metrics"]["recall"], 1.0);

    worker.shutdown().await;
    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn hundred_submissions_get_distinct_ids() {
    let store: Arc<dyn JobStore> = Arc::new(MemoryStore::new());
    let proxy = start_proxy(AppState { store: store.clone(), registry: registry(0.0) }, local()).await.unwrap();
    let base = proxy.url();
    let p = payload(1, 3, "sim-ocr-clean");
    let mut tasks = tokio::task::JoinSet::new();
    for _ in 0..100 {
        let (base, p) = (base.clone(), p.clone());
        tasks.spawn(async move { submit(&reqwest::Client::new(), &base, &p).await });
    }
    let mut ids = std::collections::BTreeSet::new();
    while let Some(r) = tasks.join_next().await {
        let (code, body) = r.unwrap();
        assert_eq!(code, 202);
        ids.insert(body["job_id"].as_str().unwrap().to_string());
    }
    assert_eq!(ids.len(), 100);
    assert_eq!(store.counts().unwrap().pending, 100);
    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn proxy_restart_loses_no_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("jobs.log");
    let reg = registry(0.02);
    let store: Arc<dyn JobStore> = Arc::new(FileStore::open(&path).unwrap());
    let proxy = start_proxy(AppState { store, registry: reg.clone() }, local()).await.unwrap();
    let addr = proxy.addr;
    let base = proxy.url();
    let client = reqwest::Client::new();

    let mut ids = Vec::new();
    for seed in 0..20 {
        let (code, body) = submit(&client, &base, &payload(5, seed, LOAD_OCR)).await;
        assert_eq!(code, 202);
        ids.push(body["job_id"].as_str().unwrap().to_string());
    }
    // a separate worker process reaching the store only through the proxy
    let worker = spawn_worker(Arc::new(HttpSource::new(&base)), reg.clone(), WorkerConfig::new(4));
    tokio::time::sleep(Duration::from_millis(150)).await;

    proxy.shutdown().await.unwrap();
    tokio::time::sleep(Duration::from_millis(200)).await;
    let store: Arc<dyn JobStore> = Arc::new(FileStore::open(&path).unwrap());
    let proxy = start_proxy(AppState { store: store.clone(), registry: reg }, addr).await.unwrap();

    for id in &ids {
        let view = wait_terminal(&client, &base, id, Duration::from_secs(60)).await;
        assert_eq!(view.status, deid_serving::JobStatus::Done, "job {id}");
    }
    let jobs = store.list().unwrap();
    assert_eq!(jobs.len(), 20);
    assert!(jobs.iter().all(|j| deid_serving::job::history_is_legal(&j.history) && j.result.is_some()));
    worker.shutdown().await;
    proxy.shutdown().await.unwrap();
}
