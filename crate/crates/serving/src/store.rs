//! Job stores: an in-memory table and a single-file append log.
//!
//! Both serialize every operation behind one lock, so each job id sees a
//! linear history. Claims are compare-and-set: a job is handed out only if it
//! is Pending, or Running under a lease that has expired. A reclaimed job
//! stays Running and gets a fresh lease token; completions carrying a stale
//! token are rejected.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::job::{now_ms, JobRecord, JobResult, JobStatus, Lease, StatusKind, Transition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("unknown job {0}")]
    NotFound(String),
    #[error("job {id} is {status}: {reason}")]
    Conflict { id: String, status: StatusKind, reason: String },
    #[error("job {0} already exists")]
    Duplicate(String),
    #[error("job store unavailable: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StoreCounts {
    pub pending: usize,
    pub running: usize,
    pub done: usize,
    pub failed: usize,
}

impl StoreCounts {
    /// Jobs not yet finished.
    pub fn depth(&self) -> usize {
        self.pending + self.running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub job: JobRecord,
    pub token: u64,
}

pub trait JobStore: Send + Sync {
    fn insert(&self, record: JobRecord) -> Result<(), StoreError>;
    fn get(&self, job_id: &str) -> Result<Option<JobRecord>, StoreError>;
    /// Oldest expired lease first, then the oldest pending job.
    fn claim(&self, worker_id: &str, lease: Duration) -> Result<Option<Claim>, StoreError>;
    fn heartbeat(&self, job_id: &str, token: u64, lease: Duration) -> Result<(), StoreError>;
    /// Exactly once per job: a second completion, or one under a stale
    /// lease, is a conflict.
    fn complete(&self, job_id: &str, token: u64, result: JobResult) -> Result<(), StoreError>;
    fn fail(&self, job_id: &str, token: u64, reason: &str) -> Result<(), StoreError>;
    fn counts(&self) -> Result<StoreCounts, StoreError>;
    /// Every record, in submission order.
    fn list(&self) -> Result<Vec<JobRecord>, StoreError>;
}

#[derive(Debug, Default)]
struct Table {
    jobs: HashMap<String, JobRecord>,
    order: Vec<String>,
    pending: VecDeque<String>,
    running: BTreeSet<String>,
    next_token: u64,
}

impl Table {
    fn insert(&mut self, record: JobRecord) -> Result<&JobRecord, StoreError> {
        if self.jobs.contains_key(&record.job_id) {
            return Err(StoreError::Duplicate(record.job_id));
        }
        let id = record.job_id.clone();
        self.index(&record);
        self.order.push(id.clone());
        self.jobs.insert(id.clone(), record);
        Ok(&self.jobs[&id])
    }

    fn index(&mut self, record: &JobRecord) {
        match record.status {
            JobStatus::Pending => self.pending.push_back(record.job_id.clone()),
            JobStatus::Running => {
                self.running.insert(record.job_id.clone());
            }
            _ => {}
        }
        if let Some(lease) = &record.lease {
            self.next_token = self.next_token.max(lease.token + 1);
        }
    }

    fn claim(&mut self, worker_id: &str, lease: Duration) -> Option<(&JobRecord, u64)> {
        let now = now_ms();
        let expired =
            self.running.iter().find(|id| self.jobs[*id].lease.as_ref().is_none_or(|l| l.expires_at <= now)).cloned();
        let id = match expired {
            Some(id) => id,
            None => self.pending.pop_front()?,
        };
        let token = self.next_token;
        self.next_token += 1;
        let job = self.jobs.get_mut(&id).expect("indexed job exists");
        if job.status == JobStatus::Pending {
            job.status = JobStatus::Running;
            job.started_at = Some(now);
            job.history.push(Transition { status: StatusKind::Running, at_ms: now });
            self.running.insert(id.clone());
        } else {
            tracing::info!(job = %id, attempt = job.attempts + 1, "reclaiming job after lease expiry");
        }
        job.attempts += 1;
        job.lease = Some(Lease { token, worker_id: worker_id.to_string(), expires_at: now + lease.as_millis() as u64 });
        Some((&self.jobs[&id], token))
    }

    fn leased(&mut self, job_id: &str, token: u64) -> Result<&mut JobRecord, StoreError> {
        let job = self.jobs.get_mut(job_id).ok_or_else(|| StoreError::NotFound(job_id.to_string()))?;
        let conflict = |job: &JobRecord, reason: &str| StoreError::Conflict {
            id: job.job_id.clone(),
            status: job.status.kind(),
            reason: reason.to_string(),
        };
        if job.status != JobStatus::Running {
            return Err(conflict(job, "not running"));
        }
        if job.lease.as_ref().map(|l| l.token) != Some(token) {
            return Err(conflict(job, "lease token is stale"));
        }
        Ok(job)
    }

    fn heartbeat(&mut self, job_id: &str, token: u64, lease: Duration) -> Result<&JobRecord, StoreError> {
        let job = self.leased(job_id, token)?;
        if let Some(l) = job.lease.as_mut() {
            l.expires_at = now_ms() + lease.as_millis() as u64;
        }
        Ok(job)
    }

    fn finish(
        &mut self,
        job_id: &str,
        token: u64,
        outcome: Result<JobResult, String>,
    ) -> Result<&JobRecord, StoreError> {
        let job = self.leased(job_id, token)?;
        let now = now_ms().max(job.started_at.unwrap_or(0));
        let (status, result) = match outcome {
            Ok(result) => (JobStatus::Done, Some(result)),
            Err(reason) => (JobStatus::Failed { reason }, None),
        };
        job.history.push(Transition { status: status.kind(), at_ms: now });
        job.status = status;
        job.result = result;
        job.finished_at = Some(now);
        job.lease = None;
        self.running.remove(job_id);
        Ok(&self.jobs[job_id])
    }

    fn counts(&self) -> StoreCounts {
        let mut c = StoreCounts::default();
        for job in self.jobs.values() {
            match job.status {
                JobStatus::Pending => c.pending += 1,
                JobStatus::Running => c.running += 1,
                JobStatus::Done => c.done += 1,
                JobStatus::Failed { .. } => c.failed += 1,
            }
        }
        c
    }

    fn list(&self) -> Vec<JobRecord> {
        self.order.iter().map(|id| self.jobs[id].clone()).collect()
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    table: Mutex<Table>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl JobStore for MemoryStore {
    fn insert(&self, record: JobRecord) -> Result<(), StoreError> {
        self.table.lock().insert(record).map(|_| ())
    }

    fn get(&self, job_id: &str) -> Result<Option<JobRecord>, StoreError> {
        Ok(self.table.lock().jobs.get(job_id).cloned())
    }

    fn claim(&self, worker_id: &str, lease: Duration) -> Result<Option<Claim>, StoreError> {
        Ok(self.table.lock().claim(worker_id, lease).map(|(job, token)| Claim { job: job.clone(), token }))
    }

    fn heartbeat(&self, job_id: &str, token: u64, lease: Duration) -> Result<(), StoreError> {
        self.table.lock().heartbeat(job_id, token, lease).map(|_| ())
    }

    fn complete(&self, job_id: &str, token: u64, result: JobResult) -> Result<(), StoreError> {
        self.table.lock().finish(job_id, token, Ok(result)).map(|_| ())
    }

    fn fail(&self, job_id: &str, token: u64, reason: &str) -> Result<(), StoreError> {
        self.table.lock().finish(job_id, token, Err(reason.to_string())).map(|_| ())
    }

    fn counts(&self) -> Result<StoreCounts, StoreError> {
        Ok(self.table.lock().counts())
    }

    fn list(&self) -> Result<Vec<JobRecord>, StoreError> {
        Ok(self.table.lock().list())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogEntry {
    Put { record: Box<JobRecord> },
    Lease { job_id: String, lease: Lease },
}

/// Append-only JSON-lines log of record snapshots. Replaying it (last
/// write per job wins) rebuilds the table; the log is compacted to one
/// line per job on open and whenever it grows past `4 x jobs + 1024` lines.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    inner: Mutex<FileInner>,
}

#[derive(Debug)]
struct FileInner {
    table: Table,
    file: File,
    lines: usize,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |e: std::io::Error| StoreError::Io(format!("{}: {e}", path.display()));
        let mut table = Table::default();
        if path.exists() {
            let mut latest: HashMap<String, JobRecord> = HashMap::new();
            let mut order = Vec::new();
            let lines: Vec<String> =
                BufReader::new(File::open(&path).map_err(io)?).lines().collect::<Result<_, _>>().map_err(io)?;
            let n = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogEntry>(line) {
                    Ok(LogEntry::Put { record }) => {
                        if !latest.contains_key(&record.job_id) {
                            order.push(record.job_id.clone());
                        }
                        latest.insert(record.job_id.clone(), *record);
                    }
                    Ok(LogEntry::Lease { job_id, lease }) => {
                        if let Some(r) = latest.get_mut(&job_id) {
                            r.lease = Some(lease);
                        }
                    }
                    // a torn final line from an interrupted append
                    Err(e) if i + 1 == n => tracing::warn!(line = i + 1, error = %e, "ignoring torn log tail"),
                    Err(e) => return Err(StoreError::Io(format!("{}: line {}: {e}", path.display(), i + 1))),
                }
            }
            for id in order {
                let record = latest.remove(&id).expect("ordered ids were seen");
                table.insert(record)?;
            }
        }
        let file = Self::rewrite(&path, &table)?;
        let lines = table.order.len();
        Ok(Self { path, inner: Mutex::new(FileInner { table, file, lines }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one line per job to a temp file, renames it over the log and
    /// reopens it for appending.
    fn rewrite(path: &Path, table: &Table) -> Result<File, StoreError> {
        let io = |e: std::io::Error| StoreError::Io(format!("{}: {e}", path.display()));
        let tmp = path.with_extension("compact");
        {
            let mut out = std::io::BufWriter::new(File::create(&tmp).map_err(io)?);
            for id in &table.order {
                let entry = LogEntry::Put { record: Box::new(table.jobs[id].clone()) };
                serde_json::to_writer(&mut out, &entry).map_err(|e| StoreError::Io(e.to_string()))?;
                out.write_all(b"\n").map_err(io)?;
            }
            let file = out.into_inner().map_err(|e| io(e.into_error()))?;
            file.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)?;
        OpenOptions::new().append(true).open(path).map_err(io)
    }

    fn append(inner: &mut FileInner, path: &Path, entry: &LogEntry) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(entry).map_err(|e| StoreError::Io(e.to_string()))?;
        line.push(b'\n');
        inner.file.write_all(&line).map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
        inner.lines += 1;
        if inner.lines > 4 * inner.table.order.len() + 1024 {
            inner.file = Self::rewrite(path, &inner.table)?;
            inner.lines = inner.table.order.len();
        }
        Ok(())
    }

    fn put(inner: &mut FileInner, path: &Path, job_id: &str) -> Result<(), StoreError> {
        let record = Box::new(inner.table.jobs[job_id].clone());
        Self::append(inner, path, &LogEntry::Put { record })
    }
}

impl JobStore for FileStore {
    fn insert(&self, record: JobRecord) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let id = inner.table.insert(record)?.job_id.clone();
        Self::put(&mut inner, &self.path, &id)
    }

    fn get(&self, job_id: &str) -> Result<Option<JobRecord>, StoreError> {
        Ok(self.inner.lock().table.jobs.get(job_id).cloned())
    }

    fn claim(&self, worker_id: &str, lease: Duration) -> Result<Option<Claim>, StoreError> {
        let mut inner = self.inner.lock();
        let Some((job, token)) = inner.table.claim(worker_id, lease) else {
            return Ok(None);
        };
        let claim = Claim { job: job.clone(), token };
        Self::put(&mut inner, &self.path, &claim.job.job_id)?;
        Ok(Some(claim))
    }

    fn heartbeat(&self, job_id: &str, token: u64, lease: Duration) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let lease = inner.table.heartbeat(job_id, token, lease)?.lease.clone().expect("running job has a lease");
        Self::append(&mut inner, &self.path, &LogEntry::Lease { job_id: job_id.to_string(), lease })
    }

    fn complete(&self, job_id: &str, token: u64, result: JobResult) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        inner.table.finish(job_id, token, Ok(result))?;
        Self::put(&mut inner, &self.path, job_id)
    }

    fn fail(&self, job_id: &str, token: u64, reason: &str) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        inner.table.finish(job_id, token, Err(reason.to_string()))?;
        Self::put(&mut inner, &self.path, job_id)
    }

    fn counts(&self) -> Result<StoreCounts, StoreError> {
        Ok(self.inner.lock().table.counts())
    }

    fn list(&self) -> Result<Vec<JobRecord>, StoreError> {
        Ok(self.inner.lock().table.list())
    }
}
