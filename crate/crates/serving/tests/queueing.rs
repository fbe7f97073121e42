use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use deid_core::backends::Registry;

use deid_core::backends::sim::LatencyModel;
use deid_serving::des::{mean_response, mmc_mean_response, simulate};
use deid_serving::loadtest::{run_load_test, LoadTestConfig};
use deid_serving::{start_proxy, AppState, MemoryStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exponential(rng: &mut impl Rng, rate: f64) -> f64 {
    -(1.0 - rng.random::<f64>()).ln() / rate
}

#[test]
fn simulation_matches_erlang_c() {
    for (lambda, servers) in [(0.7, 1), (3.0, 4), (6.0, 8)] {
        let mut rng = ChaCha8Rng::seed_from_u64(servers as u64);
        let n = 200_000;
        let mut t = 0.0;
        let arrivals: Vec<f64> = (0..n)
            .map(|_| {
                t += exponential(&mut rng, lambda);
                t
            })
            .collect();
        let services: Vec<f64> = (0..n).map(|_| exponential(&mut rng, 1.0)).collect();
        let sim = mean_response(&simulate(&arrivals, &services, servers));
        let exact = mmc_mean_response(lambda, 1.0, servers);
        assert!((sim - exact).abs() / exact < 0.03, "c={servers}: sim {sim} vs {exact}");
    }
}

#[test]
fn deterministic_service_brute_force() {
    // with equal service times FCFS on c servers is round robin
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let c = rng.random_range(1..9);
        let mut arrivals: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        arrivals.sort_by(f64::total_cmp);
        let timings = simulate(&arrivals, &vec![1.0; n], c);
        let mut finishes: Vec<f64> = Vec::new();
        for (i, a) in arrivals.iter().enumerate() {
            let free = if i >= c { finishes[i - c] } else { 0.0 };
            finishes.push(a.max(free) + 1.0);
        }
        for (t, f) in timings.iter().zip(&finishes) {
            assert!((t.finish - f).abs() < 1e-9);
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn measured_latency_tracks_reference() {
    let cfg = LoadTestConfig {
        requests: 40,
        images_per_request: 5,
        image_latency: LatencyModel::fixed(0.04),
        concurrency: 4,
        poll_interval: Duration::from_millis(20),
        ..LoadTestConfig::default()
    };
    let report = run_load_test(&cfg).await.unwrap();
    assert!(!report.degraded, "{:?}", report.failures);
    assert_eq!(report.done, 40);
    assert_eq!(report.images_total, 200);
    assert!((report.per_image - report.wall_time / 200.0).abs() < 1e-12);
    assert!(report.latency_std >= 0.0);
    // 10 rounds of 0.2 s
    assert!(report.wall_time >= 2.0 && report.wall_time < 2.0 * 1.15, "{}", report.summary());
    let reference = report.reference_latency_mean.unwrap();
    assert!((report.latency_mean - reference).abs() / reference <= 0.10, "{}", report.summary());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn rejected_requests_mark_report_degraded() {
    // a proxy that does not know the load-test extractor rejects every job
    let state = AppState { store: Arc::new(MemoryStore::new()), registry: Arc::new(Registry::builtin()) };
    let proxy = start_proxy(state, SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let cfg = LoadTestConfig {
        requests: 3,
        images_per_request: 2,
        proxy_url: Some(proxy.url()),
        ..LoadTestConfig::default()
    };
    let report = run_load_test(&cfg).await.unwrap();
    assert!(report.degraded);
    assert_eq!(report.failures.len(), 3);
    assert!(report.failures[0].contains("load-ocr"), "{}", report.failures[0]);
    assert!(report.reference_latency_mean.is_none());
    assert!(report.to_markdown().contains("Degraded run"));
    proxy.shutdown().await.unwrap();
}
