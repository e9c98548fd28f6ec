use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::time::{DateRange, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    RunCreated,
    TaskStarted,
    JobSubmitted,
    StatusUpdate,
    ProgressUpdate,
    ResultAttached,
    TaskDone,
    TaskFailed,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::RunCreated,
        EventKind::TaskStarted,
        EventKind::JobSubmitted,
        EventKind::StatusUpdate,
        EventKind::ProgressUpdate,
        EventKind::ResultAttached,
        EventKind::TaskDone,
        EventKind::TaskFailed,
    ];
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// Event as handed to the log; sequence and timestamp are assigned on append.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEvent {
    pub run_uuid: String,
    pub user_id: i64,
    pub group_id: i64,
    pub task_name: String,
    pub event_kind: EventKind,
    #[serde(default)]
    pub payload: BTreeMap<String, String>,
}

impl NewEvent {
    pub fn new(run_uuid: impl Into<String>, event_kind: EventKind, task_name: impl Into<String>) -> Self {
        NewEvent {
            run_uuid: run_uuid.into(),
            user_id: 0,
            group_id: 0,
            task_name: task_name.into(),
            event_kind,
            payload: BTreeMap::new(),
        }
    }

    pub fn by(mut self, user_id: i64, group_id: i64) -> Self {
        self.user_id = user_id;
        self.group_id = group_id;
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.payload.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowEvent {
    pub sequence: u64,
    pub run_uuid: String,
    pub user_id: i64,
    pub group_id: i64,
    pub task_name: String,
    pub event_kind: EventKind,
    pub payload: BTreeMap<String, String>,
    pub timestamp: Timestamp,
}

pub const DEFAULT_RUN_NAME: &str = "Slurm Workflow";
pub const CREATED_STATUS: &str = "CREATED";
pub const DONE_STATUS: &str = "DONE";
pub const FAILED_STATUS: &str = "FAILED";

/// Latest-status view of one workflow run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProjection {
    pub run_uuid: String,
    pub user_id: i64,
    pub group_id: i64,
    pub name: String,
    pub task: String,
    pub status: String,
    pub progress: f64,
    pub start_time: Timestamp,
    pub main_task_name: String,
}

fn parse_progress(raw: &str) -> Option<f64> {
    let value: f64 = raw.trim().trim_end_matches('%').trim().parse().ok()?;
    value.is_finite().then(|| value.clamp(0.0, 100.0))
}

impl RunProjection {
    /// Starts a projection from the first event seen for a run.
    pub fn seed(event: &WorkflowEvent) -> Self {
        RunProjection {
            run_uuid: event.run_uuid.clone(),
            user_id: event.user_id,
            group_id: event.group_id,
            name: DEFAULT_RUN_NAME.to_string(),
            task: event.task_name.clone(),
            status: CREATED_STATUS.to_string(),
            progress: 0.0,
            start_time: event.timestamp,
            main_task_name: event.task_name.clone(),
        }
    }

    pub fn apply(&mut self, event: &WorkflowEvent) {
        debug_assert_eq!(event.run_uuid, self.run_uuid);
        match event.event_kind {
            EventKind::RunCreated => {
                self.user_id = event.user_id;
                self.group_id = event.group_id;
                self.name = event.payload.get("name").cloned().unwrap_or_else(|| DEFAULT_RUN_NAME.to_string());
                self.task = event.task_name.clone();
                self.main_task_name = event.task_name.clone();
                self.start_time = event.timestamp;
            }
            EventKind::TaskStarted => self.task = event.task_name.clone(),
            EventKind::StatusUpdate => {
                if let Some(status) = event.payload.get("status") {
                    self.status = status.clone();
                }
                if let Some(p) = event.payload.get("progress").and_then(|p| parse_progress(p)) {
                    self.progress = p;
                }
            }
            EventKind::ProgressUpdate => {
                if let Some(p) = event.payload.get("progress").and_then(|p| parse_progress(p)) {
                    self.progress = p;
                }
            }
            EventKind::TaskDone => {
                self.status = DONE_STATUS.to_string();
                self.progress = 100.0;
            }
            EventKind::TaskFailed => {
                self.status = FAILED_STATUS.to_string();
                self.progress = 0.0;
            }
            EventKind::JobSubmitted | EventKind::ResultAttached => {}
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.status == DONE_STATUS || self.status == FAILED_STATUS
    }
}

/// Folds an event stream (in sequence order) into one projection per run.
pub fn replay<'a>(events: impl IntoIterator<Item = &'a WorkflowEvent>) -> HashMap<String, RunProjection> {
    let mut runs: HashMap<String, RunProjection> = HashMap::new();
    for event in events {
        runs.entry(event.run_uuid.clone())
            .or_insert_with(|| RunProjection::seed(event))
            .apply(event);
    }
    runs
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFilter {
    /// Main task (workflow) name.
    pub workflow: Option<String>,
    pub group_id: Option<i64>,
    pub user_id: Option<i64>,
    pub date_range: Option<DateRange>,
}

impl RunFilter {
    pub fn matches(&self, run: &RunProjection) -> bool {
        self.workflow.as_ref().is_none_or(|w| *w == run.main_task_name)
            && self.group_id.is_none_or(|g| g == run.group_id)
            && self.user_id.is_none_or(|u| u == run.user_id)
            && self.date_range.as_ref().is_none_or(|r| r.contains(&run.start_time))
    }
}

/// Newest start time first; run uuid breaks ties.
pub fn sort_runs(runs: &mut [RunProjection]) {
    runs.sort_by(|a, b| b.start_time.cmp(&a.start_time).then_with(|| a.run_uuid.cmp(&b.run_uuid)));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerRunRecord {
    pub order_uuid: String,
    pub container_ref: String,
    pub input: String,
    pub exit_code: i32,
    pub duration_ms: u64,
    pub at: Timestamp,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, kind: EventKind, task: &str, payload: &[(&str, &str)]) -> WorkflowEvent {
        WorkflowEvent {
            sequence: seq,
            run_uuid: "c4bd405b-2da8-4ceb-9103-16d91e8bdea6".into(),
            user_id: 402,
            group_id: 53,
            task_name: task.into(),
            event_kind: kind,
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            timestamp: Timestamp::from_datetime(chrono::Utc::now()).plus_micros(seq as i64),
        }
    }

    fn fold(events: &[WorkflowEvent]) -> RunProjection {
        replay(events).into_values().next().unwrap()
    }

    #[test]
    fn pending_at_fifty_percent() {
        let run = fold(&[
            ev(1, EventKind::RunCreated, "cellpose", &[]),
            ev(2, EventKind::JobSubmitted, "cellpose", &[("job_id", "1")]),
            ev(3, EventKind::StatusUpdate, "cellpose", &[("status", "JOB_PENDING"), ("progress", "50")]),
        ]);
        assert_eq!(run.status, "JOB_PENDING");
        assert_eq!(run.progress, 50.0);
        assert_eq!(run.name, "Slurm Workflow");
        assert_eq!(run.main_task_name, "cellpose");
    }

    #[test]
    fn done_forces_hundred() {
        let run = fold(&[
            ev(1, EventKind::RunCreated, "cellpose", &[]),
            ev(2, EventKind::ProgressUpdate, "cellpose", &[("progress", "90.0")]),
            ev(3, EventKind::TaskDone, "SLURM_Get_Results.py", &[]),
        ]);
        assert_eq!((run.status.as_str(), run.progress), ("DONE", 100.0));
    }

    #[test]
    fn failed_pins_zero() {
        let run = fold(&[
            ev(1, EventKind::RunCreated, "cellpose", &[]),
            ev(2, EventKind::ProgressUpdate, "cellpose", &[("progress", "60")]),
            ev(3, EventKind::TaskFailed, "SLURM_Remote_Conversion.py", &[]),
        ]);
        assert_eq!((run.status.as_str(), run.progress), ("FAILED", 0.0));
    }

    #[test]
    fn garbage_progress_is_ignored() {
        let run = fold(&[
            ev(1, EventKind::ProgressUpdate, "t", &[("progress", "40%")]),
            ev(2, EventKind::ProgressUpdate, "t", &[("progress", "NaN")]),
            ev(3, EventKind::ProgressUpdate, "t", &[("progress", "abc")]),
        ]);
        assert_eq!(run.progress, 40.0);
    }

    #[test]
    fn event_kind_wire_names() {
        assert_eq!(EventKind::RunCreated.to_string(), "RUN_CREATED");
        assert_eq!(EventKind::ResultAttached.to_string(), "RESULT_ATTACHED");
    }
}
