//! Workflow runs on the simulated scheduler: planning, polling, and stamping
//! outputs with provenance.
//!
//! A run goes through up to three phases, each a scheduler job. Progress is
//! banded: conversion covers 0-30, the workflow itself 30-90 and result
//! retrieval 90-100. Within a band a pending job sits at the band start, a
//! running job at the midpoint and a completed job at the band end.

pub mod registry;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::db::{DbError, EventKind, NewEvent, ProvenanceDb, RunProjection, DEFAULT_RUN_NAME};
use crate::principal::Principal;
use crate::repo::{FilesetRequest, ImageRepo, ObjectKind, RepoError, TransferMode};
use crate::scheduler::{JobRecord, JobSpec, JobState, SchedulerError, SchedulerSim, SyntheticOutput};

pub use registry::{ParamSpec, ParamType, RegistryError, WorkflowDefinition, WorkflowRegistry};

pub const WORKFLOW_NAMESPACE: &str = "biomero.workflow";
pub const RESULTS_NAMESPACE: &str = "biomero.results";
pub const CONVERT_TASK: &str = "CONVERT_ZARR_TO_TIFF";
pub const CONVERT_SCRIPT: &str = "SLURM_Remote_Conversion.py";
pub const RETRIEVE_SCRIPT: &str = "SLURM_Get_Results.py";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PhaseKind {
    Convert,
    Main,
    Retrieve,
}

impl PhaseKind {
    /// Progress band `(start, end)` in percent.
    pub fn band(self) -> (f64, f64) {
        match self {
            PhaseKind::Convert => (0.0, 30.0),
            PhaseKind::Main => (30.0, 90.0),
            PhaseKind::Retrieve => (90.0, 100.0),
        }
    }

    pub fn progress(self, state: JobState) -> f64 {
        let (start, end) = self.band();
        match state {
            JobState::Pending => start,
            JobState::Running => (start + end) / 2.0,
            _ => end,
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Convert => "CONVERT",
            PhaseKind::Main => "MAIN",
            PhaseKind::Retrieve => "RETRIEVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub task_name: String,
    pub kind: PhaseKind,
    pub job_spec: JobSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub run_uuid: String,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSelection {
    pub container_id: u64,
    pub image_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputOptions {
    pub target_dataset_id: u64,
    #[serde(default)]
    pub attach_zip: bool,
    #[serde(default)]
    pub attach_tables: bool,
    #[serde(default)]
    pub email_on_done: bool,
    /// Supports `{original_file}` (input image name without extension) and
    /// `{ext}` (output file extension).
    #[serde(default)]
    pub rename_pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub workflow_name: String,
    #[serde(default)]
    pub version: Option<String>,
    pub input_selection: InputSelection,
    #[serde(default)]
    pub params: serde_json::Map<String, Value>,
    pub output_options: OutputOptions,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyzerError {
    #[error("validation failed: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("unknown workflow {0:?}")]
    UnknownWorkflow(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("target dataset {0} does not exist")]
    TargetDatasetMissing(u64),
    #[error("no access to group {0}")]
    ForbiddenGroup(String),
    #[error(transparent)]
    Registry(RegistryError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<RegistryError> for AnalyzerError {
    fn from(err: RegistryError) -> Self {
        match err {
            RegistryError::UnknownWorkflow(name) => AnalyzerError::UnknownWorkflow(name),
            other => AnalyzerError::Registry(other),
        }
    }
}

impl AnalyzerError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalyzerError::ValidationFailed(_) => "VALIDATION_FAILED",
            AnalyzerError::UnknownWorkflow(_) => "UNKNOWN_WORKFLOW",
            AnalyzerError::UnknownRun(_) => "UNKNOWN_RUN",
            AnalyzerError::TargetDatasetMissing(_) => "TARGET_DATASET_MISSING",
            AnalyzerError::ForbiddenGroup(_) => "FORBIDDEN_GROUP",
            AnalyzerError::Registry(e) => e.code(),
            AnalyzerError::Scheduler(e) => e.code(),
            AnalyzerError::Repo(e) => e.code(),
            AnalyzerError::Db(e) => e.code(),
            AnalyzerError::Io(_) => "IO_ERROR",
        }
    }
}

/// Python `str()` rendering of a parameter value, as workflow scripts see it.
pub fn python_str(value: &Value) -> String {
    match value {
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Null => "None".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
            (Some(i), _, _) => i.to_string(),
            (_, Some(u), _) => u.to_string(),
            (_, _, Some(f)) if f.fract() == 0.0 && f.abs() < 1e16 => format!("{f:.1}"),
            (_, _, Some(f)) => f.to_string(),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn format_progress(p: f64) -> String {
    format!("{p:.1}")
}

/// Name without its last extension; a trailing `.ome` is dropped too.
pub fn image_stem(name: &str) -> String {
    let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix(".ome").map(str::to_string).unwrap_or(stem)
}

pub fn mask_name(input_name: &str) -> String {
    format!("{}_mask.tif", image_stem(input_name))
}

pub fn apply_rename(pattern: &str, input_name: &str, output_file: &str) -> String {
    let ext = Path::new(output_file).extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default();
    pattern.replace("{original_file}", &image_stem(input_name)).replace("{ext}", &ext)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    /// Scratch space for simulated job working directories.
    pub work_root: PathBuf,
    /// Input extensions that need the conversion phase.
    pub convert_extensions: Vec<String>,
    pub poll_interval: Duration,
}

impl AnalyzerConfig {
    pub fn new(work_root: impl Into<PathBuf>) -> Self {
        AnalyzerConfig {
            work_root: work_root.into(),
            convert_extensions: vec![".zarr".into()],
            poll_interval: Duration::from_millis(2000),
        }
    }
}

#[derive(Debug, Clone)]
struct InputImage {
    id: u64,
    name: String,
}

#[derive(Debug)]
struct RunState {
    plan: RunPlan,
    request: RunRequest,
    principal: Principal,
    workflow: WorkflowDefinition,
    params: IndexMap<String, Value>,
    inputs: Vec<InputImage>,
    active: usize,
    job_id: u64,
    last_state: Option<JobState>,
    main_job: Option<JobRecord>,
    finished: bool,
}

impl RunState {
    fn event(&self, kind: EventKind, task: &str) -> NewEvent {
        NewEvent::new(self.plan.run_uuid.clone(), kind, task).by(self.principal.user_id, self.principal.group_id)
    }
}

#[derive(Clone)]
pub struct Analyzer {
    db: ProvenanceDb,
    repo: ImageRepo,
    scheduler: SchedulerSim,
    registry: WorkflowRegistry,
    config: AnalyzerConfig,
    runs: Arc<Mutex<HashMap<String, Arc<Mutex<RunState>>>>>,
}

impl fmt::Debug for Analyzer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Analyzer").field("config", &self.config).finish_non_exhaustive()
    }
}

type Result<T, E = AnalyzerError> = std::result::Result<T, E>;

impl Analyzer {
    pub fn new(
        db: ProvenanceDb,
        repo: ImageRepo,
        scheduler: SchedulerSim,
        registry: WorkflowRegistry,
        config: AnalyzerConfig,
    ) -> Self {
        Analyzer { db, repo, scheduler, registry, config, runs: Arc::new(Mutex::new(HashMap::new())) }
    }

    pub fn registry(&self) -> &WorkflowRegistry {
        &self.registry
    }

    pub fn scheduler(&self) -> &SchedulerSim {
        &self.scheduler
    }

    fn runs(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<Mutex<RunState>>>> {
        self.runs.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Resolves params against the schema, filling defaults, in schema order.
    pub fn resolve_params(
        def: &WorkflowDefinition,
        params: &serde_json::Map<String, Value>,
    ) -> Result<IndexMap<String, Value>, Vec<String>> {
        let mut problems = Vec::new();
        for key in params.keys() {
            if def.param(key).is_none() {
                problems.push(format!("{key}: unknown parameter"));
            }
        }
        let mut resolved = IndexMap::new();
        for spec in &def.param_schema {
            let value = params.get(&spec.name).filter(|v| !v.is_null()).unwrap_or(&spec.default);
            match spec.coerce(value) {
                Some(v) => {
                    resolved.insert(spec.name.clone(), v);
                }
                None => problems.push(format!("{}: expected {:?}, got {value}", spec.name, spec.param_type)),
            }
        }
        if problems.is_empty() {
            Ok(resolved)
        } else {
            Err(problems)
        }
    }

    fn validate_request(&self, request: &RunRequest) -> Result<(WorkflowDefinition, IndexMap<String, Value>, Vec<InputImage>)> {
        let def = self.registry.get(&request.workflow_name)?;
        let mut problems = Vec::new();
        if let Some(version) = request.version.as_deref().filter(|v| !v.is_empty()) {
            if Some(version) != def.version() {
                problems.push(format!("version: {version} is not the registered {}", def.version().unwrap_or("")));
            }
        }
        let params = match Self::resolve_params(&def, &request.params) {
            Ok(p) => p,
            Err(mut p) => {
                problems.append(&mut p);
                IndexMap::new()
            }
        };
        let mut inputs = Vec::new();
        if request.input_selection.image_ids.is_empty() {
            problems.push("image_ids: select at least one image".into());
        } else {
            match self.repo.get_object(request.input_selection.container_id) {
                Ok(c) if matches!(c.kind, ObjectKind::Dataset | ObjectKind::Screen) => {
                    let children = self.repo.descendant_images(c.id)?;
                    for id in &request.input_selection.image_ids {
                        match children.iter().find(|img| img.id == *id) {
                            Some(img) => inputs.push(InputImage { id: img.id, name: img.name.clone() }),
                            None => problems.push(format!("image_ids: {id} is not in container {}", c.id)),
                        }
                    }
                }
                _ => problems.push(format!(
                    "container_id: {} is not a dataset or screen",
                    request.input_selection.container_id
                )),
            }
        }
        if !problems.is_empty() {
            return Err(AnalyzerError::ValidationFailed(problems));
        }
        match self.repo.get_object(request.output_options.target_dataset_id) {
            Ok(o) if o.kind == ObjectKind::Dataset => {}
            _ => return Err(AnalyzerError::TargetDatasetMissing(request.output_options.target_dataset_id)),
        }
        Ok((def, params, inputs))
    }

    fn plan(&self, run_uuid: &str, def: &WorkflowDefinition, inputs: &[InputImage], request: &RunRequest, principal: &Principal) -> RunPlan {
        let run_dir = self.config.work_root.join(run_uuid);
        let mut phases = Vec::new();
        let needs_conversion = inputs.iter().any(|img| {
            let lower = img.name.to_lowercase();
            self.config.convert_extensions.iter().any(|ext| lower.ends_with(&ext.to_lowercase()))
        });
        if needs_conversion {
            phases.push(Phase {
                task_name: CONVERT_TASK.into(),
                kind: PhaseKind::Convert,
                job_spec: JobSpec::new(CONVERT_SCRIPT, run_dir.join("convert")),
            });
        }
        let mut main = JobSpec::new(def.job_script.clone(), run_dir.join("main"));
        main.sbatch_params = def.sbatch_params.clone();
        if request.output_options.email_on_done {
            main.sbatch_params.insert("mail-user".into(), principal.username.clone());
        }
        main.outputs = inputs
            .iter()
            .map(|img| SyntheticOutput { name: mask_name(&img.name), seed: format!("{run_uuid}/{}", img.id) })
            .collect();
        phases.push(Phase { task_name: def.name.clone(), kind: PhaseKind::Main, job_spec: main });
        phases.push(Phase {
            task_name: RETRIEVE_SCRIPT.into(),
            kind: PhaseKind::Retrieve,
            job_spec: JobSpec::new(RETRIEVE_SCRIPT, run_dir.join("retrieve")),
        });
        RunPlan { run_uuid: run_uuid.to_string(), phases }
    }

    /// Validates, records RUN_CREATED and submits the first phase.
    pub fn start_run(&self, request: RunRequest, principal: &Principal) -> Result<String> {
        let selection = &request.input_selection;
        let objects = [selection.container_id, request.output_options.target_dataset_id];
        for id in objects.into_iter().chain(selection.image_ids.iter().copied()) {
            match self.repo.get_object(id) {
                Ok(object) if !principal.can_see_group(&object.group) => {
                    return Err(AnalyzerError::ForbiddenGroup(object.group));
                }
                // Missing objects are reported by validation below.
                _ => {}
            }
        }
        let (workflow, params, inputs) = self.validate_request(&request)?;
        let run_uuid = uuid::Uuid::new_v4().to_string();
        let plan = self.plan(&run_uuid, &workflow, &inputs, &request, principal);

        let mut created = NewEvent::new(run_uuid.clone(), EventKind::RunCreated, workflow.name.clone())
            .by(principal.user_id, principal.group_id)
            .with("name", DEFAULT_RUN_NAME)
            .with("workflow", workflow.name.clone())
            .with("version", workflow.version().unwrap_or_default())
            .with("container_image", workflow.container_image.clone())
            .with("username", principal.username.clone())
            .with("group", principal.group.clone())
            .with("container_id", request.input_selection.container_id.to_string())
            .with("input_image_ids", serde_json::to_string(&request.input_selection.image_ids).expect("ids"))
            .with("output_options", serde_json::to_string(&request.output_options).expect("options"))
            .with("phases", plan.phases.iter().map(|p| p.kind.to_string()).collect::<Vec<_>>().join(","));
        for (name, value) in &params {
            created = created.with(format!("Param_{name}"), python_str(value));
        }
        self.db.append_event(created)?;

        let mut state = RunState {
            plan,
            request,
            principal: principal.clone(),
            workflow,
            params,
            inputs,
            active: 0,
            job_id: 0,
            last_state: None,
            main_job: None,
            finished: false,
        };
        if let Err(err) = self.submit_active(&mut state) {
            self.fail(&mut state, err.code())?;
        }
        self.runs().insert(run_uuid.clone(), Arc::new(Mutex::new(state)));
        tracing::info!(run = %run_uuid, "run started");
        Ok(run_uuid)
    }

    fn submit_active(&self, state: &mut RunState) -> Result<()> {
        let phase = state.plan.phases[state.active].clone();
        self.db.append_event(
            state
                .event(EventKind::TaskStarted, &phase.task_name)
                .with("phase", phase.kind.to_string())
                .with("script", phase.job_spec.script.clone()),
        )?;
        let job_id = self.scheduler.submit(phase.job_spec.clone())?;
        let record = self.scheduler.job(job_id)?;
        state.job_id = job_id;
        state.last_state = None;
        self.db.append_event(
            state
                .event(EventKind::JobSubmitted, &phase.task_name)
                .with("job_id", job_id.to_string())
                .with("sbatch_command", record.sbatch_command),
        )?;
        Ok(())
    }

    fn fail(&self, state: &mut RunState, reason: &str) -> Result<()> {
        let phase = &state.plan.phases[state.active];
        self.db.append_event(
            state.event(EventKind::TaskFailed, &phase.job_spec.script).with("phase", phase.kind.to_string()).with("error", reason),
        )?;
        state.finished = true;
        Ok(())
    }

    fn projection(&self, run_uuid: &str) -> Result<RunProjection> {
        self.db.run_projection(run_uuid)?.ok_or_else(|| AnalyzerError::UnknownRun(run_uuid.to_string()))
    }

    /// Polls the active phase once and records what changed.
    pub fn advance_run(&self, run_uuid: &str) -> Result<RunProjection> {
        let Some(state) = self.runs().get(run_uuid).cloned() else {
            // Runs from an earlier process are read-only.
            return self.projection(run_uuid);
        };
        let mut state = state.lock().unwrap_or_else(|p| p.into_inner());
        if !state.finished {
            self.step(&mut state)?;
        }
        self.projection(run_uuid)
    }

    fn step(&self, state: &mut RunState) -> Result<()> {
        let phase = state.plan.phases[state.active].clone();
        let record = self.scheduler.poll(state.job_id)?;
        if state.last_state != Some(record.state) {
            state.last_state = Some(record.state);
            let progress = format_progress(phase.kind.progress(record.state));
            self.db.append_event(
                state
                    .event(EventKind::StatusUpdate, &phase.task_name)
                    .with("status", format!("JOB_{}", record.state))
                    .with("job_id", record.job_id.to_string()),
            )?;
            if !matches!(record.state, JobState::Failed | JobState::Cancelled) {
                self.db.append_event(state.event(EventKind::ProgressUpdate, &phase.task_name).with("progress", progress))?;
            }
        }
        match record.state {
            JobState::Pending | JobState::Running => Ok(()),
            JobState::Failed | JobState::Cancelled => self.fail(state, &format!("JOB_{}", record.state)),
            JobState::Completed => {
                if phase.kind == PhaseKind::Main {
                    state.main_job = Some(record);
                }
                if state.active + 1 < state.plan.phases.len() {
                    state.active += 1;
                    if let Err(err) = self.submit_active(state) {
                        return self.fail(state, err.code());
                    }
                    return Ok(());
                }
                match self.finalize(state) {
                    Ok(images) => {
                        self.db.append_event(
                            state.event(EventKind::TaskDone, &phase.task_name).with("output_images", images.len().to_string()),
                        )?;
                        state.finished = true;
                        Ok(())
                    }
                    Err(err) => {
                        tracing::warn!(run = %state.plan.run_uuid, error = %err, "finalizing outputs failed");
                        self.fail(state, err.code())
                    }
                }
            }
        }
    }

    /// Polls every unfinished run once.
    pub fn advance_all(&self) -> usize {
        let live: Vec<String> = self
            .runs()
            .iter()
            .filter(|(_, s)| !s.lock().map(|s| s.finished).unwrap_or(true))
            .map(|(k, _)| k.clone())
            .collect();
        for run in &live {
            if let Err(err) = self.advance_run(run) {
                tracing::warn!(run = %run, error = %err, "advance failed");
            }
        }
        live.len()
    }

    /// Polls `run_uuid` until it finishes or `max_polls` is reached.
    pub fn drive_to_completion(&self, run_uuid: &str, max_polls: usize) -> Result<RunProjection> {
        for _ in 0..max_polls {
            let projection = self.advance_run(run_uuid)?;
            if projection.is_terminal() {
                return Ok(projection);
            }
        }
        self.projection(run_uuid)
    }

    pub fn plan_of(&self, run_uuid: &str) -> Option<RunPlan> {
        self.runs().get(run_uuid).map(|s| s.lock().unwrap_or_else(|p| p.into_inner()).plan.clone())
    }

    /// Imports retrieved outputs of a run whose phases have all completed.
    pub fn finalize_outputs(&self, run_uuid: &str) -> Result<Vec<u64>> {
        let state = self.runs().get(run_uuid).cloned().ok_or_else(|| AnalyzerError::UnknownRun(run_uuid.to_string()))?;
        let state = state.lock().unwrap_or_else(|p| p.into_inner());
        self.finalize(&state)
    }

    fn finalize(&self, state: &RunState) -> Result<Vec<u64>> {
        let opts = &state.request.output_options;
        match self.repo.get_object(opts.target_dataset_id) {
            Ok(o) if o.kind == ObjectKind::Dataset => {}
            _ => return Err(AnalyzerError::TargetDatasetMissing(opts.target_dataset_id)),
        }
        let main = state.main_job.as_ref().ok_or_else(|| AnalyzerError::UnknownRun(state.plan.run_uuid.clone()))?;
        let main_phase = state.plan.phases.iter().find(|p| p.kind == PhaseKind::Main).expect("plan has a main phase");
        let run_uuid = &state.plan.run_uuid;

        let mut produced = Vec::new();
        for (input, out) in state.inputs.iter().zip(&main_phase.job_spec.outputs) {
            let path = main_phase.job_spec.workdir.join(&out.name);
            if path.is_file() {
                produced.push((input.clone(), path));
            }
        }

        let mut image_ids = Vec::new();
        for (input, path) in &produced {
            let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let image_name = match opts.rename_pattern.as_deref().filter(|p| !p.is_empty()) {
                Some(pattern) => apply_rename(pattern, &input.name, &file_name),
                None => file_name,
            };
            let (_, ids) = self.repo.register_fileset(FilesetRequest {
                image_names: vec![image_name.clone()],
                destination_id: opts.target_dataset_id,
                targets: vec![path.clone()],
                transfer_mode: TransferMode::Copy,
                owner: state.principal.username.clone(),
                group: state.principal.group.clone(),
            })?;
            let image_id = ids[0];
            let mut pairs = vec![
                ("Workflow_ID".to_string(), run_uuid.clone()),
                ("Workflow".to_string(), state.workflow.name.clone()),
                ("Version".to_string(), state.workflow.version().unwrap_or_default().to_string()),
                ("Task".to_string(), main_phase.task_name.clone()),
                ("Container".to_string(), state.workflow.container_image.clone()),
                ("Sbatch_Command".to_string(), main.sbatch_command.clone()),
                ("Job_ID".to_string(), main.job_id.to_string()),
                ("Input_Image_ID".to_string(), input.id.to_string()),
                ("Input_Image".to_string(), input.name.clone()),
                ("Scripts".to_string(), state.plan.phases.iter().map(|p| p.job_spec.script.as_str()).collect::<Vec<_>>().join(", ")),
            ];
            for (name, value) in &state.params {
                pairs.push((format!("Param_{name}"), python_str(value)));
            }
            self.repo.annotate(image_id, WORKFLOW_NAMESPACE, pairs)?;
            self.db.append_event(
                state
                    .event(EventKind::ResultAttached, RETRIEVE_SCRIPT)
                    .with("image_id", image_id.to_string())
                    .with("image_name", image_name),
            )?;
            image_ids.push(image_id);
        }

        if !produced.is_empty() && (opts.attach_zip || opts.attach_tables) {
            let scratch = self.config.work_root.join(run_uuid).join("attachments");
            fs::create_dir_all(&scratch)?;
            if opts.attach_zip {
                let zip_path = scratch.join(format!("{}_results.zip", state.workflow.name));
                write_zip(&zip_path, produced.iter().map(|(_, p)| p.as_path()))?;
                self.repo.attach_file(opts.target_dataset_id, RESULTS_NAMESPACE, &zip_path, "results.zip")?;
            }
            if opts.attach_tables {
                let table = scratch.join("measurements.csv");
                let mut w = csv::Writer::from_path(&table).map_err(std::io::Error::other)?;
                w.write_record(["image_id", "input_image_id", "input_image", "bytes"]).map_err(std::io::Error::other)?;
                for ((input, path), id) in produced.iter().zip(&image_ids) {
                    let bytes = fs::metadata(path)?.len();
                    w.write_record([id.to_string(), input.id.to_string(), input.name.clone(), bytes.to_string()])
                        .map_err(std::io::Error::other)?;
                }
                w.flush()?;
                self.repo.attach_file(opts.target_dataset_id, RESULTS_NAMESPACE, &table, "measurements.csv")?;
            }
            let _ = fs::remove_dir_all(&scratch);
        }
        Ok(image_ids)
    }
}

fn write_zip<'a>(dest: &Path, files: impl Iterator<Item = &'a Path>) -> std::io::Result<()> {
    let mut zip = zip::ZipWriter::new(fs::File::create(dest)?);
    let options = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for file in files {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        zip.start_file(name, options).map_err(std::io::Error::other)?;
        zip.write_all(&fs::read(file)?)?;
    }
    zip.finish().map_err(std::io::Error::other)?;
    Ok(())
}

/// Background thread calling [`Analyzer::advance_all`] on an interval.
pub struct Ticker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Ticker {
    pub fn start(analyzer: Analyzer) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let interval = analyzer.config.poll_interval;
        let handle = thread::spawn(move || {
            let slice = Duration::from_millis(20).min(interval);
            while !flag.load(Ordering::SeqCst) {
                analyzer.advance_all();
                let mut waited = Duration::ZERO;
                while waited < interval && !flag.load(Ordering::SeqCst) {
                    thread::sleep(slice);
                    waited += slice;
                }
            }
        });
        Ticker { stop, handle: Some(handle) }
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Ticker {
    fn drop(&mut self) {
        self.halt();
    }
}

/// The cellpose workflow as registered in a default deployment.
pub fn cellpose_definition() -> WorkflowDefinition {
    let mut def = WorkflowDefinition::new(
        "cellpose",
        "Cellpose: a generalist algorithm for cellular segmentation",
        "https://github.com/TorecLuik/W_NucleiSegmentation-Cellpose/tree/v1.3.1",
        "torecluik/w_nucleisegmentation-cellpose:v1.3.1",
    );
    def.param_schema = vec![
        ParamSpec::new("nuc_channel", ParamType::Int, Value::from(3), "Channel with the nuclei"),
        ParamSpec::new("use_gpu", ParamType::Bool, Value::from(false), "Use GPU acceleration"),
        ParamSpec::new("cp_model", ParamType::Enum, Value::from("nuclei"), "Cellpose model")
            .with_options(&["nuclei", "cyto", "cyto2"]),
        ParamSpec::new("diameter", ParamType::Int, Value::from(0), "Expected diameter; 0 estimates it"),
        ParamSpec::new("prob_threshold", ParamType::Float, Value::from(0.5), "Cell probability threshold"),
        ParamSpec::new("use_zarr", ParamType::Bool, Value::from(false), "Read input as zarr"),
    ];
    def
}

/// Params as recorded by a run (`Param_<name>` → Python string).
pub fn param_pairs(params: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    params.iter().filter(|(k, _)| k.starts_with("Param_")).map(|(k, v)| (k.clone(), v.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn python_rendering() {
        assert_eq!(python_str(&json!(false)), "False");
        assert_eq!(python_str(&json!(3)), "3");
        assert_eq!(python_str(&json!(0.5)), "0.5");
        assert_eq!(python_str(&json!(1.0)), "1.0");
        assert_eq!(python_str(&json!("nuclei")), "nuclei");
    }

    #[test]
    fn bands() {
        assert_eq!(PhaseKind::Main.progress(JobState::Completed), 90.0);
        assert_eq!(PhaseKind::Main.progress(JobState::Running), 60.0);
        assert_eq!(PhaseKind::Retrieve.progress(JobState::Pending), 90.0);
        assert_eq!(format_progress(90.0), "90.0");
    }

    #[test]
    fn names() {
        assert_eq!(mask_name("4) Pancreatic Islet Cells of the Mouse.tif"), "4) Pancreatic Islet Cells of the Mouse_mask.tif");
        assert_eq!(image_stem("a.ome.tiff"), "a");
        assert_eq!(apply_rename("{original_file}_seg.{ext}", "cells.czi", "cells_mask.tif"), "cells_seg.tif");
    }

    #[test]
    fn params_fill_defaults_and_type_check() {
        let def = cellpose_definition();
        let given = json!({"nuc_channel": 3, "prob_threshold": 1}).as_object().unwrap().clone();
        let resolved = Analyzer::resolve_params(&def, &given).unwrap();
        assert_eq!(resolved.keys().collect::<Vec<_>>(), ["nuc_channel", "use_gpu", "cp_model", "diameter", "prob_threshold", "use_zarr"]);
        assert_eq!(python_str(&resolved["prob_threshold"]), "1.0");
        let bad = json!({"nuc_channel": "three"}).as_object().unwrap().clone();
        assert_eq!(Analyzer::resolve_params(&def, &bad).unwrap_err().len(), 1);
        let unknown = json!({"bogus": 1}).as_object().unwrap().clone();
        assert!(Analyzer::resolve_params(&def, &unknown).is_err());
    }
}
