//! Serving layer: a stateless HTTP proxy in front of a durable job store,
//! pull-based inference workers, an autoscaler and a load-test harness.

pub mod autoscale;
pub mod des;
pub mod job;
pub mod loadtest;
pub mod proxy;
pub mod store;
pub mod worker;

pub use job::{JobPayload, JobRecord, JobResult, JobStatus, JobView, StatusKind};
pub use proxy::{start_proxy, AppState, ProxyHandle};
pub use store::{FileStore, JobStore, MemoryStore, StoreCounts, StoreError};
pub use worker::{spawn_worker, HttpSource, JobSource, StoreSource, WorkerConfig, WorkerHandle};
