//! Simulated batch scheduler with an sbatch-like front end.
//!
//! Time only moves when a job is polled: a job leaves PENDING after
//! `queue_ticks` polls and reaches its terminal state `run_ticks` polls later.
//! In realtime mode a tick is one wall-clock second since submission instead.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::time::{Clock, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed | JobState::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "PENDING",
            JobState::Running => "RUNNING",
            JobState::Completed => "COMPLETED",
            JobState::Failed => "FAILED",
            JobState::Cancelled => "CANCELLED",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// File the job writes into its workdir when it completes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticOutput {
    pub name: String,
    /// Content is derived from this string only.
    pub seed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub script: String,
    #[serde(default)]
    pub sbatch_params: IndexMap<String, String>,
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    pub workdir: PathBuf,
    #[serde(default)]
    pub outputs: Vec<SyntheticOutput>,
}

impl JobSpec {
    pub fn new(script: impl Into<String>, workdir: impl Into<PathBuf>) -> Self {
        JobSpec {
            script: script.into(),
            sbatch_params: IndexMap::new(),
            inputs: Vec::new(),
            workdir: workdir.into(),
            outputs: Vec::new(),
        }
    }

    pub fn param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.sbatch_params.insert(key.into(), value.into());
        self
    }
}

/// `sbatch --k=v ... <script>` with parameters in insertion order.
pub fn sbatch_command(spec: &JobSpec) -> String {
    let mut cmd = String::from("sbatch");
    for (k, v) in &spec.sbatch_params {
        cmd.push_str(&format!(" --{k}={v}"));
    }
    cmd.push(' ');
    cmd.push_str(&spec.script);
    cmd
}

/// Deterministic placeholder image bytes for a seed.
pub fn synthetic_bytes(seed: &str) -> Vec<u8> {
    let digest = Sha256::digest(seed.as_bytes());
    let mut bytes = b"II*\0".to_vec();
    for _ in 0..8 {
        bytes.extend_from_slice(&digest);
    }
    bytes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: u64,
    pub script: String,
    pub state: JobState,
    pub submit_time: Timestamp,
    pub start_time: Option<Timestamp>,
    pub end_time: Option<Timestamp>,
    pub outputs: Vec<PathBuf>,
    pub sbatch_command: String,
    pub mail_user: Option<String>,
    pub ticks: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("malformed job spec: {0}")]
    MalformedSpec(String),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job {0} already finished")]
    AlreadyTerminal(u64),
    #[error("failures can only be injected at RUNNING or COMPLETED, not {0}")]
    InvalidInjection(JobState),
    #[error("cannot write job output: {0}")]
    Io(#[from] std::io::Error),
}

impl SchedulerError {
    pub fn code(&self) -> &'static str {
        match self {
            SchedulerError::MalformedSpec(_) => "MALFORMED_SPEC",
            SchedulerError::UnknownJob(_) => "UNKNOWN_JOB",
            SchedulerError::AlreadyTerminal(_) => "ALREADY_TERMINAL",
            SchedulerError::InvalidInjection(_) => "INVALID_INJECTION",
            SchedulerError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub queue_ticks: u64,
    pub run_ticks: u64,
    pub realtime: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { queue_ticks: 1, run_ticks: 2, realtime: false }
    }
}

#[derive(Debug)]
struct Job {
    record: JobRecord,
    spec: JobSpec,
    fail_at: Option<JobState>,
    wall_submit: Timestamp,
}

#[derive(Debug, Default)]
struct Inner {
    next_id: u64,
    clock_ticks: u64,
    jobs: HashMap<u64, Job>,
    injections: Vec<(String, JobState)>,
}

impl Inner {
    /// Virtual timestamp: one second per simulator operation after a fixed origin.
    fn virtual_now(&mut self) -> Timestamp {
        self.clock_ticks += 1;
        Timestamp::from_datetime(chrono::DateTime::UNIX_EPOCH).plus_micros(self.clock_ticks as i64 * 1_000_000)
    }
}

#[derive(Clone)]
pub struct SchedulerSim {
    config: SimConfig,
    clock: Arc<dyn Clock>,
    inner: Arc<Mutex<Inner>>,
}

impl fmt::Debug for SchedulerSim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchedulerSim").field("config", &self.config).finish_non_exhaustive()
    }
}

impl SchedulerSim {
    pub fn new(config: SimConfig, clock: Arc<dyn Clock>) -> Self {
        SchedulerSim { config, clock, inner: Arc::new(Mutex::new(Inner { next_id: 1, ..Inner::default() })) }
    }

    pub fn config(&self) -> SimConfig {
        self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stamp(&self, inner: &mut Inner) -> Timestamp {
        if self.config.realtime {
            self.clock.now()
        } else {
            inner.virtual_now()
        }
    }

    pub fn submit(&self, spec: JobSpec) -> Result<u64, SchedulerError> {
        if spec.script.trim().is_empty() {
            return Err(SchedulerError::MalformedSpec("script is empty".into()));
        }
        if let Some(bad) = spec.sbatch_params.keys().find(|k| k.is_empty() || k.contains(char::is_whitespace)) {
            return Err(SchedulerError::MalformedSpec(format!("bad sbatch parameter name {bad:?}")));
        }
        if let Some(bad) = spec.outputs.iter().find(|o| !crate::runner::is_single_segment(&o.name)) {
            return Err(SchedulerError::MalformedSpec(format!("bad output name {:?}", bad.name)));
        }
        let mut inner = self.lock();
        let job_id = inner.next_id;
        inner.next_id += 1;
        let fail_at = inner.injections.iter().find(|(m, _)| spec.script.contains(m.as_str())).map(|(_, s)| *s);
        let submit_time = self.stamp(&mut inner);
        let record = JobRecord {
            job_id,
            script: spec.script.clone(),
            state: JobState::Pending,
            submit_time,
            start_time: None,
            end_time: None,
            outputs: Vec::new(),
            sbatch_command: sbatch_command(&spec),
            mail_user: spec.sbatch_params.get("mail-user").cloned(),
            ticks: 0,
        };
        tracing::debug!(job_id, command = %record.sbatch_command, "job submitted");
        let wall_submit = self.clock.now();
        inner.jobs.insert(job_id, Job { record, spec, fail_at, wall_submit });
        Ok(job_id)
    }

    pub fn poll(&self, job_id: u64) -> Result<JobRecord, SchedulerError> {
        let mut inner = self.lock();
        let now = self.stamp(&mut inner);
        let wall = if self.config.realtime { Some(self.clock.now()) } else { None };
        let job = inner.jobs.get_mut(&job_id).ok_or(SchedulerError::UnknownJob(job_id))?;
        if job.record.state.is_terminal() {
            return Ok(job.record.clone());
        }
        job.record.ticks = match wall {
            Some(wall) => wall.seconds_since(&job.wall_submit).max(0) as u64,
            None => job.record.ticks + 1,
        };
        let ticks = job.record.ticks;
        let (queue, run) = (self.config.queue_ticks, self.config.run_ticks);

        let was_running = job.record.state == JobState::Running;
        if job.record.state == JobState::Pending && ticks >= queue {
            job.record.state = JobState::Running;
            job.record.start_time = Some(now);
        }
        if job.record.state == JobState::Running {
            if was_running && job.fail_at == Some(JobState::Running) {
                job.record.state = JobState::Failed;
                job.record.end_time = Some(now);
            } else if ticks >= queue + run {
                job.record.end_time = Some(now);
                if job.fail_at.is_some() {
                    job.record.state = JobState::Failed;
                } else {
                    fs::create_dir_all(&job.spec.workdir)?;
                    let mut outputs = Vec::new();
                    for out in &job.spec.outputs {
                        let path = job.spec.workdir.join(&out.name);
                        fs::write(&path, synthetic_bytes(&out.seed))?;
                        outputs.push(path);
                    }
                    job.record.outputs = outputs;
                    job.record.state = JobState::Completed;
                }
            }
        }
        Ok(job.record.clone())
    }

    pub fn cancel(&self, job_id: u64) -> Result<(), SchedulerError> {
        let mut inner = self.lock();
        let now = self.stamp(&mut inner);
        let job = inner.jobs.get_mut(&job_id).ok_or(SchedulerError::UnknownJob(job_id))?;
        if job.record.state.is_terminal() {
            return Err(SchedulerError::AlreadyTerminal(job_id));
        }
        job.record.state = JobState::Cancelled;
        job.record.end_time = Some(now);
        Ok(())
    }

    /// Jobs submitted from now on whose script contains `matcher` fail at
    /// `at_state`: RUNNING fails on the poll after the job starts, COMPLETED
    /// fails at the tick the job would have completed.
    pub fn inject_failure(&self, matcher: impl Into<String>, at_state: JobState) -> Result<(), SchedulerError> {
        if !matches!(at_state, JobState::Running | JobState::Completed) {
            return Err(SchedulerError::InvalidInjection(at_state));
        }
        self.lock().injections.push((matcher.into(), at_state));
        Ok(())
    }

    pub fn clear_injections(&self) {
        self.lock().injections.clear();
    }

    pub fn job(&self, job_id: u64) -> Result<JobRecord, SchedulerError> {
        self.lock().jobs.get(&job_id).map(|j| j.record.clone()).ok_or(SchedulerError::UnknownJob(job_id))
    }

    /// All jobs ordered by id.
    pub fn jobs(&self) -> Vec<JobRecord> {
        let inner = self.lock();
        let mut jobs: Vec<_> = inner.jobs.values().map(|j| j.record.clone()).collect();
        jobs.sort_by_key(|j| j.job_id);
        jobs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SystemClock;

    fn sim() -> SchedulerSim {
        SchedulerSim::new(SimConfig::default(), Arc::new(SystemClock))
    }

    #[test]
    fn sbatch_command_keeps_param_order() {
        let spec = JobSpec::new("jobs/cellpose.sh", "/tmp").param("partition", "gpu").param("time", "00:15:00");
        assert_eq!(sbatch_command(&spec), "sbatch --partition=gpu --time=00:15:00 jobs/cellpose.sh");
    }

    #[test]
    fn ids_are_monotone_from_one() {
        let s = sim();
        assert_eq!(s.submit(JobSpec::new("a.sh", "/tmp")).unwrap(), 1);
        assert_eq!(s.submit(JobSpec::new("b.sh", "/tmp")).unwrap(), 2);
        assert_eq!(s.submit(JobSpec::new(" ", "/tmp")).unwrap_err().code(), "MALFORMED_SPEC");
    }

    #[test]
    fn tick_rule_and_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let s = sim();
        let mut spec = JobSpec::new("jobs/cellpose.sh", tmp.path());
        spec.outputs.push(SyntheticOutput { name: "img_mask.tif".into(), seed: "r/1".into() });
        let id = s.submit(spec).unwrap();
        assert_eq!(s.poll(id).unwrap().state, JobState::Running);
        assert_eq!(s.poll(id).unwrap().state, JobState::Running);
        let done = s.poll(id).unwrap();
        assert_eq!(done.state, JobState::Completed);
        assert_eq!(fs::read(&done.outputs[0]).unwrap(), synthetic_bytes("r/1"));
        assert_eq!(s.poll(id).unwrap(), done);
    }

    #[test]
    fn injected_running_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let s = sim();
        s.inject_failure("Remote_Conversion", JobState::Running).unwrap();
        let id = s.submit(JobSpec::new("SLURM_Remote_Conversion.py", tmp.path())).unwrap();
        assert_eq!(s.poll(id).unwrap().state, JobState::Running);
        assert_eq!(s.poll(id).unwrap().state, JobState::Failed);
        assert_eq!(s.inject_failure("x", JobState::Pending).unwrap_err().code(), "INVALID_INJECTION");
    }

    #[test]
    fn injected_completion_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let s = sim();
        s.inject_failure("cellpose", JobState::Completed).unwrap();
        let id = s.submit(JobSpec::new("jobs/cellpose.sh", tmp.path())).unwrap();
        let states: Vec<_> = (0..3).map(|_| s.poll(id).unwrap().state).collect();
        assert_eq!(states, [JobState::Running, JobState::Running, JobState::Failed]);
    }

    #[test]
    fn cancel_rules() {
        let s = sim();
        let id = s.submit(JobSpec::new("a.sh", "/tmp")).unwrap();
        s.cancel(id).unwrap();
        assert_eq!(s.job(id).unwrap().state, JobState::Cancelled);
        assert_eq!(s.cancel(id).unwrap_err().code(), "ALREADY_TERMINAL");
        assert_eq!(s.poll(99).unwrap_err().code(), "UNKNOWN_JOB");
    }

    #[test]
    fn mail_user_is_recorded() {
        let s = sim();
        let id = s.submit(JobSpec::new("a.sh", "/tmp").param("mail-user", "luik")).unwrap();
        assert_eq!(s.job(id).unwrap().mail_user.as_deref(), Some("luik"));
    }
}
