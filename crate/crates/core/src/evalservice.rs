//! Submission storage and the evaluation job queue.
//!
//! Jobs are JSON files moved between `queue/{pending,claimed,done,failed}`
//! by atomic rename; a claim is won by whoever renames the pending file
//! first. Each claim gets a lease sidecar (`claimed/<job>.lease`) holding a
//! random token; completing or failing a job requires the token to still be
//! current. Results are committed by renaming a fully written temporary
//! directory into place, so each job ends up with exactly one result set no
//! matter how many times it was executed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::datastore::{is_slug, read_json, to_json_bytes, Datastore, DatastoreError};
use crate::evalcore::report_json;
use crate::fsutil::{self, FileLock};
use crate::ingest::ValidationReport;
use crate::taskdef::{evaluate_submission, read_snapshot, PipelineError, TaskError, TaskStore};

pub const DEFAULT_LEASE: TimeDelta = TimeDelta::minutes(10);
pub const DEFAULT_POLL: Duration = Duration::from_secs(2);
pub const POLL_JITTER: Duration = Duration::from_millis(500);
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("submission {0} has not passed validation")]
    NotValidated(String),
    #[error("lease on {0} expired; results discarded")]
    LeaseExpired(String),
    #[error("no such submission {0}")]
    NoSuchSubmission(String),
    #[error("corrupt queue entry {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = QueueError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Claimed,
    Done,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 4] = [JobState::Pending, JobState::Claimed, JobState::Done, JobState::Failed];

    pub fn dir(self) -> &'static str {
        match self {
            JobState::Pending => "pending",
            JobState::Claimed => "claimed",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub submission: String,
    pub protocol: String,
    pub enqueued_at: DateTime<Utc>,
    pub attempts: u32,
    pub last_error: Option<String>,
}

impl Job {
    pub fn name(&self) -> String {
        job_name(&self.submission, &self.protocol)
    }
}

pub fn job_name(submission: &str, protocol: &str) -> String {
    format!("{submission}_{protocol}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub worker: String,
    pub token: String,
    pub claimed_at: DateTime<Utc>,
    pub lease_expiry: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimedJob {
    pub job: Job,
    pub claim: Claim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Census {
    pub pending: usize,
    pub claimed: usize,
    pub done: usize,
    pub failed: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.pending + self.claimed + self.done + self.failed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Private,
    Public,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub id: String,
    pub task: String,
    pub owner: String,
    pub method: String,
    #[serde(default)]
    pub description: String,
    pub uploaded_at: DateTime<Utc>,
    pub visibility: Visibility,
    /// Snapshot hash the submission is evaluated against.
    pub snapshot: String,
    pub protocols: Vec<String>,
    pub validation: ValidationReport,
}

/// Submission archives and their records under `<store>/submissions`.
#[derive(Debug, Clone)]
pub struct SubmissionStore {
    root: PathBuf,
}

impl SubmissionStore {
    pub fn new(store: &Path) -> Self {
        SubmissionStore {
            root: store.join("submissions"),
        }
    }

    pub fn new_id() -> String {
        format!("s{}", fsutil::nonce())
    }

    pub fn dir(&self, sid: &str) -> PathBuf {
        self.root.join(sid)
    }

    pub fn archive_path(&self, sid: &str) -> PathBuf {
        self.dir(sid).join("archive.zip")
    }

    pub fn results_dir(&self, sid: &str, protocol: &str) -> PathBuf {
        self.dir(sid).join("results").join(protocol)
    }

    /// Stores the archive first so that a visible record always has one.
    pub fn create(&self, rec: &SubmissionRecord, archive: &[u8]) -> Result<()> {
        fsutil::write_atomic(&self.archive_path(&rec.id), archive)?;
        if !fsutil::create_exclusive(&self.dir(&rec.id).join("submission.json"), &to_json_bytes(rec))? {
            return Err(QueueError::Corrupt {
                path: rec.id.clone(),
                reason: "submission id collision".into(),
            });
        }
        Ok(())
    }

    pub fn get(&self, sid: &str) -> Result<SubmissionRecord> {
        if !sid.bytes().all(|b| b.is_ascii_alphanumeric()) || sid.is_empty() {
            return Err(QueueError::NoSuchSubmission(sid.to_string()));
        }
        read_json(&self.dir(sid).join("submission.json"))
            .map_err(|e| QueueError::Corrupt {
                path: sid.to_string(),
                reason: e.to_string(),
            })?
            .ok_or_else(|| QueueError::NoSuchSubmission(sid.to_string()))
    }

    /// Read-modify-write of a record under its lock.
    pub fn update(&self, sid: &str, f: impl FnOnce(&mut SubmissionRecord)) -> Result<SubmissionRecord> {
        let _guard = FileLock::acquire(&self.dir(sid).join("record.lock"))?;
        let mut rec = self.get(sid)?;
        f(&mut rec);
        fsutil::write_atomic(&self.dir(sid).join("submission.json"), &to_json_bytes(&rec))?;
        Ok(rec)
    }

    pub fn list(&self) -> Result<Vec<SubmissionRecord>> {
        let mut out = Vec::new();
        for name in fsutil::list_names(&self.root)? {
            match self.get(&name) {
                Ok(r) => out.push(r),
                Err(QueueError::NoSuchSubmission(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn has_results(&self, sid: &str, protocol: &str) -> bool {
        self.results_dir(sid, protocol).join("overall.json").is_file()
    }

    pub fn overall_bytes(&self, sid: &str, protocol: &str) -> Result<Option<Vec<u8>>> {
        Ok(fsutil::read_opt(&self.results_dir(sid, protocol).join("overall.json"))?)
    }

    pub fn sample_bytes(&self, sid: &str, protocol: &str, image: &str) -> Result<Option<Vec<u8>>> {
        if !image.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
            return Ok(None);
        }
        Ok(fsutil::read_opt(
            &self.results_dir(sid, protocol).join("per_sample").join(format!("{image}.json")),
        )?)
    }

    /// Moves a fully written result directory into place unless a result
    /// set already exists. Returns whether this call committed.
    pub fn commit_results(&self, sid: &str, protocol: &str, files: &[(String, Vec<u8>)]) -> Result<bool> {
        let results = self.dir(sid).join("results");
        let target = results.join(protocol);
        if target.exists() {
            return Ok(false);
        }
        let tmp = results.join(format!("{}{}", fsutil::TMP_PREFIX, fsutil::nonce()));
        for (rel, bytes) in files {
            let path = tmp.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&path, bytes)?;
        }
        fs::File::open(&tmp)?.sync_all()?;
        // rename(2) onto an existing non-empty directory fails, which makes
        // this a rename-if-absent.
        match fs::rename(&tmp, &target) {
            Ok(()) => Ok(true),
            Err(_) if target.exists() => {
                let _ = fs::remove_dir_all(&tmp);
                Ok(false)
            }
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                Err(e.into())
            }
        }
    }
}

#[derive(Clone)]
pub struct Queue {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    max_attempts: u32,
}

impl std::fmt::Debug for Queue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Queue").field("root", &self.root).finish()
    }
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> QueueError {
    QueueError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn read_job(path: &Path) -> Result<Option<Job>> {
    match fsutil::read_opt(path)? {
        None => Ok(None),
        Some(b) => serde_json::from_slice(&b).map(Some).map_err(|e| corrupt(path, e)),
    }
}

/// Time the file was last renamed or written: the claim instant for a
/// claimed job whose lease sidecar was never written.
fn changed_at(path: &Path) -> io::Result<DateTime<Utc>> {
    let meta = fs::metadata(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::MetadataExt;
        if let Some(t) = DateTime::from_timestamp(meta.ctime(), meta.ctime_nsec() as u32) {
            return Ok(t);
        }
    }
    Ok(meta.modified()?.into())
}

impl Queue {
    pub fn new(store: &Path) -> Self {
        Queue {
            root: store.join("queue"),
            clock: Arc::new(SystemClock),
            max_attempts: MAX_ATTEMPTS,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_max_attempts(mut self, n: u32) -> Self {
        self.max_attempts = n.max(1);
        self
    }

    fn path(&self, state: JobState, name: &str) -> PathBuf {
        self.root.join(state.dir()).join(name)
    }

    fn lease_path(&self, name: &str) -> PathBuf {
        self.root.join("claimed").join(format!("{name}.lease"))
    }

    fn lock(&self, name: &str) -> io::Result<FileLock> {
        FileLock::acquire(&self.root.join("locks").join(format!("{name}.lock")))
    }

    /// Registers one pending job per protocol. Re-enqueueing an existing
    /// job is a no-op. Returns the jobs created by this call.
    pub fn enqueue(&self, sub: &SubmissionRecord) -> Result<Vec<Job>> {
        if !sub.validation.ok {
            return Err(QueueError::NotValidated(sub.id.clone()));
        }
        let mut created = Vec::new();
        for protocol in &sub.protocols {
            let job = Job {
                submission: sub.id.clone(),
                protocol: protocol.clone(),
                enqueued_at: self.clock.now(),
                attempts: 0,
                last_error: None,
            };
            let name = job.name();
            // The registry entry is the idempotency key: only its creator
            // publishes the pending file.
            if fsutil::create_exclusive(&self.root.join("jobs").join(&name), b"")? {
                fsutil::write_atomic(&self.path(JobState::Pending, &name), &to_json_bytes(&job))?;
                created.push(job);
            }
        }
        Ok(created)
    }

    pub fn state_of(&self, submission: &str, protocol: &str) -> Result<Option<(JobState, Job)>> {
        let name = job_name(submission, protocol);
        // Probe in lifecycle order twice so a job moving forward mid-probe
        // is still found.
        for _ in 0..2 {
            for state in JobState::ALL {
                if let Some(job) = read_job(&self.path(state, &name))? {
                    return Ok(Some((state, job)));
                }
            }
        }
        Ok(None)
    }

    fn job_names(&self, state: JobState) -> io::Result<Vec<String>> {
        Ok(fsutil::list_names(&self.root.join(state.dir()))?
            .into_iter()
            .filter(|n| n.ends_with(".json"))
            .collect())
    }

    /// Counts per state, re-listed until two consecutive listings agree so
    /// that no job is seen mid-rename.
    pub fn census(&self) -> Result<Census> {
        let take = || -> io::Result<Census> {
            Ok(Census {
                pending: self.job_names(JobState::Pending)?.len(),
                claimed: self.job_names(JobState::Claimed)?.len(),
                done: self.job_names(JobState::Done)?.len(),
                failed: self.job_names(JobState::Failed)?.len(),
            })
        };
        let mut prev = take()?;
        loop {
            let next = take()?;
            if next == prev {
                return Ok(next);
            }
            prev = next;
        }
    }

    /// Claims the oldest pending job, optionally restricted to one protocol.
    pub fn claim_next(&self, worker: &str, protocol: Option<&str>, lease: TimeDelta) -> Result<Option<ClaimedJob>> {
        let mut candidates = Vec::new();
        for name in self.job_names(JobState::Pending)? {
            if let Some(p) = protocol {
                if !name.ends_with(&format!("_{p}.json")) {
                    continue;
                }
            }
            if let Some(job) = read_job(&self.path(JobState::Pending, &name))? {
                candidates.push((job.enqueued_at, name, job));
            }
        }
        candidates.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        fs::create_dir_all(self.root.join("claimed"))?;
        for (_, name, _) in candidates {
            match fs::rename(self.path(JobState::Pending, &name), self.path(JobState::Claimed, &name)) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            }
            // The pending file may have been rewritten by a retry between
            // listing and renaming; the renamed file is authoritative.
            let job = read_job(&self.path(JobState::Claimed, &name))?
                .ok_or_else(|| corrupt(&self.path(JobState::Claimed, &name), "vanished after claim"))?;
            let now = self.clock.now();
            let claim = Claim {
                worker: worker.to_string(),
                token: fsutil::nonce(),
                claimed_at: now,
                lease_expiry: now + lease,
            };
            fsutil::write_atomic(&self.lease_path(&name), &to_json_bytes(&claim))?;
            return Ok(Some(ClaimedJob { job, claim }));
        }
        Ok(None)
    }

    fn current_claim(&self, name: &str) -> Result<Option<Claim>> {
        let path = self.lease_path(name);
        match fsutil::read_opt(&path)? {
            None => Ok(None),
            Some(b) => serde_json::from_slice(&b).map(Some).map_err(|e| corrupt(&path, e)),
        }
    }

    /// Checks under the job lock that `cj` still owns the claim.
    fn holds(&self, cj: &ClaimedJob) -> Result<bool> {
        let name = cj.job.name();
        Ok(self.path(JobState::Claimed, &name).exists()
            && self.current_claim(&name)?.is_some_and(|c| c.token == cj.claim.token))
    }

    fn finish(&self, name: &str, to: JobState) -> Result<()> {
        fs::create_dir_all(self.root.join(to.dir()))?;
        // Drop the lease first: once the job leaves `claimed` a new claimant
        // may write its own sidecar under the same name.
        match fs::remove_file(self.lease_path(name)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
        fs::rename(self.path(JobState::Claimed, name), self.path(to, name))?;
        Ok(())
    }

    /// Commits results (unless a result set already exists) and marks the
    /// job done.
    pub fn complete(&self, subs: &SubmissionStore, cj: &ClaimedJob, files: &[(String, Vec<u8>)]) -> Result<bool> {
        let name = cj.job.name();
        let _guard = self.lock(&name)?;
        if !self.holds(cj)? {
            return Err(QueueError::LeaseExpired(name));
        }
        let committed = subs.commit_results(&cj.job.submission, &cj.job.protocol, files)?;
        self.finish(&name, JobState::Done)?;
        Ok(committed)
    }

    /// Records a failed attempt; the job is retried until `max_attempts`.
    pub fn fail(&self, cj: &ClaimedJob, error: &str) -> Result<JobState> {
        let name = cj.job.name();
        let _guard = self.lock(&name)?;
        if !self.holds(cj)? {
            return Err(QueueError::LeaseExpired(name));
        }
        let claimed = self.path(JobState::Claimed, &name);
        let mut job = read_job(&claimed)?.ok_or_else(|| corrupt(&claimed, "missing"))?;
        job.attempts += 1;
        job.last_error = Some(error.to_string());
        fsutil::write_atomic(&claimed, &to_json_bytes(&job))?;
        let to = if job.attempts < self.max_attempts {
            JobState::Pending
        } else {
            JobState::Failed
        };
        self.finish(&name, to)?;
        Ok(to)
    }

    /// Returns claims whose lease ran out to pending. Idempotent.
    pub fn reap_leases(&self, now: DateTime<Utc>, lease: TimeDelta) -> Result<usize> {
        let mut reaped = 0;
        for name in self.job_names(JobState::Claimed)? {
            let _guard = self.lock(&name)?;
            let claimed = self.path(JobState::Claimed, &name);
            if !claimed.exists() {
                continue;
            }
            let expiry = match self.current_claim(&name)? {
                Some(c) => c.lease_expiry,
                // Claimer died between rename and lease write.
                None => match changed_at(&claimed) {
                    Ok(t) => t + lease,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                    Err(e) => return Err(e.into()),
                },
            };
            if expiry < now {
                self.finish(&name, JobState::Pending)?;
                reaped += 1;
            }
        }
        Ok(reaped)
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }
}

/// Produces the files of one result set for a job.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, job: &Job) -> std::result::Result<Vec<(String, Vec<u8>)>, String>;
}

/// Runs the real scoring pipeline against the store.
#[derive(Debug, Clone)]
pub struct StoreEvaluator {
    tasks: TaskStore,
    subs: SubmissionStore,
}

impl StoreEvaluator {
    pub fn new(ds: Datastore) -> Self {
        StoreEvaluator {
            subs: SubmissionStore::new(ds.root()),
            tasks: TaskStore::new(ds),
        }
    }
}

/// Files of a result set in their canonical form.
pub fn report_files(report: &crate::evalcore::EvalReport, per_sample: bool) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("overall.json".to_string(), report_json(&report.overall))];
    if per_sample {
        for s in &report.samples {
            files.push((format!("per_sample/{}.json", s.image), report_json(s)));
        }
    }
    files
}

impl Evaluator for StoreEvaluator {
    fn evaluate(&self, job: &Job) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
        let sub = self.subs.get(&job.submission).map_err(|e| e.to_string())?;
        let task = self.tasks.task(&sub.task).map_err(|e: TaskError| e.to_string())?;
        let protocol = task
            .evaluation(&job.protocol)
            .ok_or_else(|| format!("task {} has no evaluation {}", task.task_id, job.protocol))?;
        let snapshot = fs::read(self.tasks.snapshot_path(&task.task_id, &sub.snapshot))
            .map_err(|e| format!("snapshot {}: {e}", sub.snapshot))?;
        let snapshot = read_snapshot(&snapshot).map_err(|e| e.to_string())?;
        let archive = fs::read(self.subs.archive_path(&sub.id)).map_err(|e| e.to_string())?;
        match evaluate_submission(&snapshot, &task.input_format, protocol, &archive) {
            Ok((_, report)) => Ok(report_files(&report, protocol.per_sample)),
            Err(PipelineError::Invalid(r)) => Err(format!("submission invalid: {} errors", r.errors.len())),
            Err(PipelineError::Eval(e)) => Err(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub protocol: Option<String>,
    pub lease: TimeDelta,
    pub poll: Duration,
    /// Stop once the queue has been idle for this many polls.
    pub exit_when_idle: Option<u32>,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>) -> Self {
        WorkerConfig {
            worker_id: worker_id.into(),
            protocol: None,
            lease: DEFAULT_LEASE,
            poll: DEFAULT_POLL,
            exit_when_idle: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    pub completed: usize,
    pub failed: usize,
    pub lost_leases: usize,
}

fn jittered(poll: Duration) -> Duration {
    let jitter = POLL_JITTER.min(poll / 2).as_millis() as i64;
    let delta = if jitter > 0 { rand::rng().random_range(-jitter..=jitter) } else { 0 };
    Duration::from_millis((poll.as_millis() as i64 + delta).max(1) as u64)
}

/// Processes one job if any is available. Returns `Ok(false)` when idle.
pub fn work_once(
    queue: &Queue,
    subs: &SubmissionStore,
    evaluator: &dyn Evaluator,
    cfg: &WorkerConfig,
    stats: &mut WorkerStats,
) -> Result<bool> {
    queue.reap_leases(queue.now(), cfg.lease)?;
    let Some(cj) = queue.claim_next(&cfg.worker_id, cfg.protocol.as_deref(), cfg.lease)? else {
        return Ok(false);
    };
    let outcome = if subs.has_results(&cj.job.submission, &cj.job.protocol) {
        Ok(Vec::new())
    } else {
        evaluator.evaluate(&cj.job)
    };
    let res = match outcome {
        Ok(files) => queue.complete(subs, &cj, &files).map(|_| stats.completed += 1),
        Err(msg) => {
            tracing::warn!(job = %cj.job.name(), error = %msg, "evaluation failed");
            queue.fail(&cj, &msg).map(|_| stats.failed += 1)
        }
    };
    match res {
        Err(QueueError::LeaseExpired(name)) => {
            tracing::warn!(job = %name, "lease lost before commit");
            stats.lost_leases += 1;
            Ok(true)
        }
        other => other.map(|_| true),
    }
}

/// Polls the queue until `stop` is set (or the idle limit is reached).
pub fn run_worker(
    queue: &Queue,
    subs: &SubmissionStore,
    evaluator: &dyn Evaluator,
    cfg: &WorkerConfig,
    stop: &AtomicBool,
) -> Result<WorkerStats> {
    let mut stats = WorkerStats::default();
    let mut idle = 0;
    while !stop.load(Ordering::Relaxed) {
        if work_once(queue, subs, evaluator, cfg, &mut stats)? {
            idle = 0;
            continue;
        }
        idle += 1;
        if cfg.exit_when_idle.is_some_and(|n| idle >= n) {
            break;
        }
        std::thread::sleep(jittered(cfg.poll));
    }
    Ok(stats)
}

/// Whether `s` can be used as a protocol id in job names.
pub fn valid_protocol_id(s: &str) -> bool {
    is_slug(s)
}

impl From<DatastoreError> for QueueError {
    fn from(e: DatastoreError) -> Self {
        match e {
            DatastoreError::Io(e) => QueueError::Io(e),
            other => QueueError::Corrupt {
                path: String::new(),
                reason: other.to_string(),
            },
        }
    }
}
