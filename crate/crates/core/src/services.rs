//! Wiring of all components from a [`Config`], plus setup and health checks.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::analyzer::{cellpose_definition, Analyzer, AnalyzerConfig, WorkflowRegistry};
use crate::config::{BackendKind, Config, ConfigError};
use crate::db::{DbError, DestinationType, ImportOrder, NewOrder, ProvenanceDb};
use crate::forms::FormsRegistry;
use crate::importer::{Importer, ImporterConfig};
use crate::principal::Principal;
use crate::repo::ImageRepo;
use crate::runner::{ContainerBackend, ContainerRunner, MockBackend, PreprocessingSpec, ShellBackend};
use crate::scheduler::{JobSpec, JobState, SchedulerSim};
use crate::store::Database;
use crate::time::{Clock, SystemClock};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{what}: {detail}")]
    Setup { what: String, detail: String },
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        "FATAL_CONFIG"
    }

    fn setup(what: &str, detail: impl ToString) -> Self {
        ServiceError::Setup { what: what.to_string(), detail: detail.to_string() }
    }
}

/// Every component, sharing one store.
#[derive(Clone, Debug)]
pub struct Services {
    pub config: Config,
    pub database: Database,
    pub db: ProvenanceDb,
    pub repo: ImageRepo,
    pub runner: Arc<ContainerRunner>,
    pub scheduler: SchedulerSim,
    pub registry: WorkflowRegistry,
    pub analyzer: Analyzer,
    pub forms: FormsRegistry,
    pub importer: Importer,
}

fn runner_for(config: &Config) -> Result<ContainerRunner, ServiceError> {
    let backend: Arc<dyn ContainerBackend> = match config.runner.backend {
        BackendKind::Mock => Arc::new(MockBackend::standard()),
        BackendKind::Shell => {
            Arc::new(ShellBackend::new(&config.runner.template).map_err(|e| ServiceError::setup("runner.template", e))?)
        }
    };
    Ok(ContainerRunner::new(backend).with_timeout(Duration::from_secs(config.runner.timeout_secs)))
}

impl Services {
    pub fn open(config: &Config) -> Result<Self, ServiceError> {
        Self::open_with_clock(config, Arc::new(SystemClock))
    }

    pub fn open_with_clock(config: &Config, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        config.validate()?;
        let database = Database::open(&config.db.path)
            .map_err(|e| ServiceError::setup(&format!("db {}", config.db.path.display()), e))?
            .with_clock(clock.clone());
        let db = ProvenanceDb::new(database.clone());
        let repo = ImageRepo::new(database.clone(), &config.repo.managed_root);
        let runner = Arc::new(runner_for(config)?);
        let scheduler = SchedulerSim::new(config.sim, clock);
        let registry = WorkflowRegistry::open(&config.analyzer.config_file)
            .map_err(|e| ServiceError::setup("analyzer.config_file", e))?;
        let mut analyzer_config = AnalyzerConfig::new(&config.analyzer.work_root);
        analyzer_config.convert_extensions = config.analyzer.convert_extensions.clone();
        analyzer_config.poll_interval = config.analyzer_poll_interval();
        let analyzer =
            Analyzer::new(db.clone(), repo.clone(), scheduler.clone(), registry.clone(), analyzer_config);
        let forms = FormsRegistry::new(database.clone(), repo.clone());
        let mut importer_config = ImporterConfig::new(&config.repo.remote_root, &config.importer.local_workdir);
        importer_config.workers = config.importer.workers;
        importer_config.poll_interval = config.importer_poll_interval();
        importer_config.display_names = config.importer.display_names.clone();
        let importer = Importer::new(db.clone(), repo.clone(), runner.clone(), importer_config);
        Ok(Services {
            config: config.clone(),
            database,
            db,
            repo,
            runner,
            scheduler,
            registry,
            analyzer,
            forms,
            importer,
        })
    }
}

/// An import order as a client states it; owner and group come from the session.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct OrderRequest {
    pub destination_id: u64,
    pub destination_type: DestinationType,
    pub files: Vec<String>,
    #[serde(default)]
    pub preprocessing: Option<PreprocessingSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("group {0:?} has no folder mapping")]
    UnmappedGroup(String),
    #[error("path {0:?} leaves the group folder")]
    PathEscape(String),
    #[error("no such directory {0:?}")]
    NotFound(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RemoteError {
    pub fn code(&self) -> &'static str {
        match self {
            RemoteError::UnmappedGroup(_) => "UNMAPPED_GROUP",
            RemoteError::PathEscape(_) => "PATH_ESCAPE",
            RemoteError::NotFound(_) => "NOT_FOUND",
            RemoteError::Db(e) => e.code(),
            RemoteError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemoteEntry {
    pub name: String,
    /// Path relative to the remote root, as used in order files.
    pub path: String,
    pub is_dir: bool,
    pub size: u64,
}

impl Services {
    /// Creates a PENDING order owned by `principal`. Shared by the HTTP and CLI front ends.
    pub fn submit_order(&self, request: OrderRequest, principal: &Principal) -> Result<ImportOrder, DbError> {
        let order = self.db.create_order(NewOrder {
            group: principal.group.clone(),
            username: principal.username.clone(),
            destination_id: request.destination_id,
            destination_type: request.destination_type,
            files: request.files,
            preprocessing: request.preprocessing,
        })?;
        tracing::info!(order = %order.uuid, group = %order.group, files = order.files.len(), "order created");
        Ok(order)
    }

    /// Lists one directory inside the session group's remote folder, sorted by name.
    pub fn browse_remote(&self, path: &str, principal: &Principal) -> Result<Vec<RemoteEntry>, RemoteError> {
        let subfolder =
            self.db.mapping_for(&principal.group)?.ok_or_else(|| RemoteError::UnmappedGroup(principal.group.clone()))?;
        let relative = Path::new(path.trim_start_matches('/'));
        if relative.components().any(|c| !matches!(c, std::path::Component::Normal(_) | std::path::Component::CurDir)) {
            return Err(RemoteError::PathEscape(path.to_string()));
        }
        let base = self.config.repo.remote_root.join(&subfolder);
        let dir = base.join(relative);
        if !dir.is_dir() {
            return Err(RemoteError::NotFound(path.to_string()));
        }
        // Symlinks inside the tree must not lead out of it either.
        if !fs::canonicalize(&dir)?.starts_with(fs::canonicalize(&base)?) {
            return Err(RemoteError::PathEscape(path.to_string()));
        }
        let mut entries = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let meta = fs::metadata(entry.path())?;
            let rel = Path::new(&subfolder).join(relative).join(&name);
            let rel: std::path::PathBuf = rel.components().filter(|c| !matches!(c, std::path::Component::CurDir)).collect();
            entries.push(RemoteEntry {
                name,
                path: rel.to_string_lossy().replace('\\', "/"),
                is_dir: meta.is_dir(),
                size: if meta.is_dir() { 0 } else { meta.len() },
            });
        }
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(entries)
    }
}

/// Creates directories, the store and a starter workflow registry.
/// Running it again changes nothing.
pub fn init(config: &Config) -> Result<Vec<String>, ServiceError> {
    let mut created = Vec::new();
    for dir in [
        &config.repo.managed_root,
        &config.repo.remote_root,
        &config.importer.local_workdir,
        &config.analyzer.work_root,
    ] {
        if !dir.exists() {
            fs::create_dir_all(dir).map_err(|e| ServiceError::setup(&dir.display().to_string(), e))?;
            created.push(dir.display().to_string());
        }
    }
    if let Some(parent) = config.db.path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ServiceError::setup("db", e))?;
    }
    let db_existed = config.db.path.exists();
    Database::open(&config.db.path).map_err(|e| ServiceError::setup("db", e))?;
    if !db_existed {
        created.push(config.db.path.display().to_string());
    }
    if !config.analyzer.config_file.exists() {
        if let Some(parent) = config.analyzer.config_file.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| ServiceError::setup("analyzer.config_file", e))?;
        }
        let registry = WorkflowRegistry::open(&config.analyzer.config_file)
            .map_err(|e| ServiceError::setup("analyzer.config_file", e))?;
        registry.register(cellpose_definition()).map_err(|e| ServiceError::setup("analyzer.config_file", e))?;
        created.push(config.analyzer.config_file.display().to_string());
    }
    Ok(created)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, outcome: Result<String, String>) -> Self {
        let (pass, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        CheckResult { name: name.to_string(), pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check_db(config: &Config) -> Result<String, String> {
    let db = Database::open(&config.db.path).map_err(|e| e.to_string())?;
    db.ping().map_err(|e| e.to_string())?;
    Ok(config.db.path.display().to_string())
}

fn check_writable(dir: &Path) -> Result<String, String> {
    if !dir.is_dir() {
        return Err(format!("{} does not exist", dir.display()));
    }
    let probe = dir.join(format!(".fairflow-probe-{}", uuid::Uuid::new_v4()));
    fs::write(&probe, b"probe").map_err(|e| format!("{}: {e}", dir.display()))?;
    fs::remove_file(&probe).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(format!("{} writable", dir.display()))
}

fn check_runner(config: &Config) -> Result<String, String> {
    let runner = runner_for(config).map_err(|e| e.to_string())?;
    let scratch = config.importer.local_workdir.join(format!("probe-{}", uuid::Uuid::new_v4()));
    let result = runner.probe(&scratch);
    let _ = fs::remove_dir_all(&scratch);
    result.map(|_| format!("{} backend ran probe image", runner.backend_name())).map_err(|e| e.to_string())
}

fn check_scheduler(config: &Config) -> Result<String, String> {
    // A private simulator so the probe job never shows up in real runs.
    let sim = SchedulerSim::new(crate::scheduler::SimConfig { realtime: false, ..config.sim }, Arc::new(SystemClock));
    let workdir = config.analyzer.work_root.join(format!("probe-{}", uuid::Uuid::new_v4()));
    let job = sim.submit(JobSpec::new("probe.sh", &workdir)).map_err(|e| e.to_string())?;
    let limit = config.sim.queue_ticks + config.sim.run_ticks + 4;
    let mut state = JobState::Pending;
    for _ in 0..limit {
        state = sim.poll(job).map_err(|e| e.to_string())?.state;
        if state == JobState::Completed {
            break;
        }
    }
    let _ = fs::remove_dir_all(&workdir);
    if state == JobState::Completed {
        Ok(format!("probe job {job} completed"))
    } else {
        Err(format!("probe job {job} ended {state:?}"))
    }
}

/// Setup checks, in a fixed order.
pub fn check(config: &Config) -> Vec<CheckResult> {
    vec![
        CheckResult::new("db", check_db(config)),
        CheckResult::new("remote_root", check_writable(&config.repo.remote_root)),
        CheckResult::new("runner", check_runner(config)),
        CheckResult::new("scheduler", check_scheduler(config)),
    ]
}
