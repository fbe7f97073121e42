//! Concurrency controller: samples queue depth at a fixed interval and sets
//! the worker limit to the depth clamped to `[min, max]`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::worker::JobSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscalePolicy {
    pub min: usize,
    pub max: usize,
    pub interval: Duration,
}

impl AutoscalePolicy {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min: min.max(1), max: max.max(min.max(1)), interval: Duration::from_secs(1) }
    }

    pub fn desired(&self, depth: usize) -> usize {
        depth.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSample {
    pub t: f64,
    pub depth: usize,
    pub concurrency: usize,
}

pub struct AutoscalerHandle {
    samples: Arc<Mutex<Vec<ScaleSample>>>,
    stop: watch::Sender<bool>,
    join: tokio::task::JoinHandle<()>,
}

impl AutoscalerHandle {
    pub fn samples(&self) -> Vec<ScaleSample> {
        self.samples.lock().clone()
    }

    pub async fn shutdown(self) -> Vec<ScaleSample> {
        let _ = self.stop.send(true);
        let _ = self.join.await;
        self.samples.lock().clone()
    }
}

pub fn spawn_autoscaler(
    source: Arc<dyn JobSource>,
    limit: Arc<AtomicUsize>,
    policy: AutoscalePolicy,
) -> AutoscalerHandle {
    let samples = Arc::new(Mutex::new(Vec::new()));
    let (stop, mut rx) = watch::channel(false);
    let log = samples.clone();
    let join = tokio::spawn(async move {
        let start = Instant::now();
        let mut ticker = tokio::time::interval(policy.interval);
        loop {
            tokio::select! {
                _ = ticker.tick() => {}
                _ = rx.changed() => break,
            }
            match source.counts().await {
                Ok(counts) => {
                    let concurrency = policy.desired(counts.depth());
                    limit.store(concurrency, Ordering::SeqCst);
                    log.lock().push(ScaleSample {
                        t: start.elapsed().as_secs_f64(),
                        depth: counts.depth(),
                        concurrency,
                    });
                }
                Err(e) => tracing::warn!(error = %e, "autoscaler could not read queue depth"),
            }
        }
    });
    AutoscalerHandle { samples, stop, join }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desired_is_clamped_depth() {
        let p = AutoscalePolicy::new(2, 16);
        assert_eq!([0, 2, 9, 16, 500].map(|d| p.desired(d)), [2, 2, 9, 16, 16]);
        let odd = AutoscalePolicy::new(0, 0);
        assert_eq!((odd.min, odd.max), (1, 1));
    }
}
