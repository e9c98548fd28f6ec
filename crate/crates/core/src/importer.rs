//! Import worker: claims pending orders and drives each through packaging,
//! optional container preprocessing, in-place registration, link
//! redirection, metadata attachment and finalization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::db::{ContainerRunRecord, DestinationType, ImportOrder, OrderStatus, ProvenanceDb};
use crate::repo::{FilesetRequest, ImageRepo, NewObject, ObjectKind, TransferMode};
use crate::runner::ContainerRunner;
use crate::time::Timestamp;

pub const IMPORT_NAMESPACE: &str = "omeroadi.import";
pub const PREPROCESSING_NAMESPACE: &str = "omeroadi.preprocessing";
pub const CSV_NAMESPACE: &str = "omeroadi.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportStep {
    Package,
    Preprocess,
    Import,
    Redirect,
    Metadata,
    Finalize,
}

impl ImportStep {
    pub const ALL: [ImportStep; 6] = [
        ImportStep::Package,
        ImportStep::Preprocess,
        ImportStep::Import,
        ImportStep::Redirect,
        ImportStep::Metadata,
        ImportStep::Finalize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ImportStep::Package => "package",
            ImportStep::Preprocess => "preprocess",
            ImportStep::Import => "import",
            ImportStep::Redirect => "redirect",
            ImportStep::Metadata => "metadata",
            ImportStep::Finalize => "finalize",
        }
    }
}

impl fmt::Display for ImportStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Monitor label for an order status.
pub fn display_stage(status: OrderStatus) -> String {
    let raw = status.as_str();
    let mut label = String::from("Import ");
    label.push_str(&raw[..1]);
    label.push_str(&raw[1..].to_ascii_lowercase());
    label
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImporterConfig {
    pub remote_root: PathBuf,
    pub local_workdir: PathBuf,
    pub workers: usize,
    pub poll_interval: Duration,
    /// username → name shown in the "Added by" key.
    pub display_names: BTreeMap<String, String>,
}

impl ImporterConfig {
    pub fn new(remote_root: impl Into<PathBuf>, local_workdir: impl Into<PathBuf>) -> Self {
        ImporterConfig {
            remote_root: remote_root.into(),
            local_workdir: local_workdir.into(),
            workers: 4,
            poll_interval: Duration::from_millis(2000),
            display_names: BTreeMap::new(),
        }
    }
}

/// In-flight working state of one order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPackage {
    pub order: ImportOrder,
    /// Order files resolved against the remote root.
    pub original_files: Vec<PathBuf>,
    pub target_files: Vec<PathBuf>,
    pub converted_file: Option<PathBuf>,
    pub remote_converted_file: Option<PathBuf>,
    pub harvested_metadata: BTreeMap<String, String>,
    /// Sidecar rows per original file, in file order.
    pub csv_sidecar_rows: Vec<Vec<(String, String)>>,
    pub workdir: PathBuf,
    pub started_at: Timestamp,
}

impl DataPackage {
    /// Sidecar rows for the `index`-th imported image. A converted target
    /// carries the rows of every original file.
    pub fn sidecar_rows_for(&self, index: usize) -> Vec<(String, String)> {
        let rows: Vec<(String, String)> = if self.converted_file.is_some() && self.target_files.len() == 1 {
            self.csv_sidecar_rows.iter().flatten().cloned().collect()
        } else {
            self.csv_sidecar_rows.get(index).cloned().unwrap_or_default()
        };
        let mut seen = HashSet::new();
        rows.into_iter().filter(|(k, _)| seen.insert(k.clone())).collect()
    }
}

/// `image.czi` → `image.csv` in the same directory.
pub fn sidecar_path(file: &Path) -> PathBuf {
    file.with_extension("csv")
}

/// Two-column key/value CSV; a leading `Key,Value` header row is skipped.
pub fn read_sidecar(path: &Path) -> Result<Vec<(String, String)>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 2 {
            return Err(format!("row {} has {} columns", i + 1, record.len()));
        }
        let (key, value) = (&record[0], &record[1]);
        if i == 0 && key.eq_ignore_ascii_case("key") && value.eq_ignore_ascii_case("value") {
            continue;
        }
        rows.push((key.to_string(), value.to_string()));
    }
    Ok(rows)
}

fn bracket_list<T: AsRef<str>>(items: &[T]) -> String {
    let joined: Vec<&str> = items.iter().map(AsRef::as_ref).collect();
    format!("[{}]", joined.join(", "))
}

/// Failure of one processing step; rendered as `<step>: <CODE>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    pub step: ImportStep,
    pub code: String,
    pub detail: String,
}

impl StepFailure {
    fn new(step: ImportStep, code: &str, detail: impl fmt::Display) -> Self {
        StepFailure { step, code: code.to_string(), detail: detail.to_string() }
    }

    pub fn message(&self) -> String {
        format!("{}: {}", self.step, self.code)
    }
}

/// Test hook consulted before each step; returning a code fails that step.
pub type FaultHook = Arc<dyn Fn(&ImportOrder, ImportStep) -> Option<String> + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum ImporterError {
    #[error("fatal configuration: {0}")]
    FatalConfig(String),
    #[error(transparent)]
    Db(#[from] crate::db::DbError),
}

impl ImporterError {
    pub fn code(&self) -> &'static str {
        match self {
            ImporterError::FatalConfig(_) => "FATAL_CONFIG",
            ImporterError::Db(e) => e.code(),
        }
    }
}

#[derive(Clone)]
pub struct Importer {
    db: ProvenanceDb,
    repo: ImageRepo,
    runner: Arc<ContainerRunner>,
    config: ImporterConfig,
    fault: Option<FaultHook>,
}

impl fmt::Debug for Importer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Importer").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Importer {
    pub fn new(db: ProvenanceDb, repo: ImageRepo, runner: Arc<ContainerRunner>, config: ImporterConfig) -> Self {
        Importer { db, repo, runner, config, fault: None }
    }

    pub fn with_fault_hook(mut self, hook: FaultHook) -> Self {
        self.fault = Some(hook);
        self
    }

    pub fn config(&self) -> &ImporterConfig {
        &self.config
    }

    /// Checks the settings a daemon needs before it may start.
    pub fn check_config(&self) -> Result<(), ImporterError> {
        if self.config.workers == 0 {
            return Err(ImporterError::FatalConfig("importer.workers must be at least 1".into()));
        }
        let root = &self.config.remote_root;
        if !root.is_dir() {
            return Err(ImporterError::FatalConfig(format!("remote root {} is not a directory", root.display())));
        }
        let probe = root.join(format!(".fairflow-probe-{}", uuid::Uuid::new_v4()));
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| ImporterError::FatalConfig(format!("remote root {} is not writable: {e}", root.display())))?;
        fs::create_dir_all(&self.config.local_workdir).map_err(|e| {
            ImporterError::FatalConfig(format!("cannot create {}: {e}", self.config.local_workdir.display()))
        })?;
        Ok(())
    }

    /// Claims one pending order and processes it.
    pub fn process_next(&self, worker_id: &str) -> Result<Option<(String, OrderStatus)>, ImporterError> {
        let Some(order) = self.db.claim_next_pending(worker_id)? else {
            return Ok(None);
        };
        let uuid = order.uuid.clone();
        let status = self.process_order(order);
        Ok(Some((uuid, status)))
    }

    /// Processes claimed orders until none are pending.
    pub fn drain(&self, worker_id: &str) -> Result<usize, ImporterError> {
        let mut n = 0;
        while self.process_next(worker_id)?.is_some() {
            n += 1;
        }
        Ok(n)
    }

    fn step<T>(
        &self,
        order: &ImportOrder,
        step: ImportStep,
        f: impl FnOnce() -> Result<T, StepFailure>,
    ) -> Result<T, StepFailure> {
        let started = Instant::now();
        let result = match self.fault.as_ref().and_then(|hook| hook(order, step)) {
            Some(code) => Err(StepFailure::new(step, &code, "injected fault")),
            None => f(),
        };
        let outcome = if result.is_ok() { "ok" } else { "fail" };
        tracing::info!("order={} step={} outcome={} ms={}", order.uuid, step, outcome, started.elapsed().as_millis());
        result
    }

    /// Runs an order already in STARTED to a terminal status. Never panics
    /// on step failures; they end in FAILED.
    pub fn process_order(&self, order: ImportOrder) -> OrderStatus {
        let workdir = self.config.local_workdir.join(&order.uuid);
        let outcome = self.run_steps(&order, &workdir);
        let _ = fs::remove_dir_all(&workdir);
        match outcome {
            Ok(()) => OrderStatus::Completed,
            Err(failure) => {
                tracing::warn!(order = %order.uuid, step = %failure.step, code = %failure.code, detail = %failure.detail, "order failed");
                if let Err(err) = self.db.update_order_status(&order.uuid, OrderStatus::Failed, Some(&failure.message())) {
                    tracing::error!(order = %order.uuid, error = %err, "cannot record failure");
                }
                OrderStatus::Failed
            }
        }
    }

    fn run_steps(&self, order: &ImportOrder, workdir: &Path) -> Result<(), StepFailure> {
        let mut package = self.step(order, ImportStep::Package, || self.build_package(order, workdir))?;
        self.step(order, ImportStep::Preprocess, || self.preprocess(&mut package))?;
        let (fileset_id, image_ids) = self.step(order, ImportStep::Import, || self.import(&package))?;
        self.step(order, ImportStep::Redirect, || self.redirect(&package, fileset_id))?;
        self.step(order, ImportStep::Metadata, || {
            self.attach_import_metadata(&package, &image_ids)
                .map_err(|e| StepFailure::new(ImportStep::Metadata, e.code(), &e))
        })?;
        self.step(order, ImportStep::Finalize, || {
            self.db
                .update_order_status(&order.uuid, OrderStatus::Completed, None)
                .map_err(|e| StepFailure::new(ImportStep::Finalize, e.code(), &e))
        })
    }

    pub fn build_package(&self, order: &ImportOrder, workdir: &Path) -> Result<DataPackage, StepFailure> {
        let fail = |code: &str, detail: String| StepFailure::new(ImportStep::Package, code, detail);
        if order.files.is_empty() {
            return Err(fail("EMPTY_FILESET", "order has no files".into()));
        }
        fs::create_dir_all(workdir).map_err(|e| fail("IO_ERROR", e.to_string()))?;
        let original_files: Vec<PathBuf> = order.files.iter().map(|f| self.config.remote_root.join(f)).collect();
        let mut csv_sidecar_rows = Vec::new();
        for file in &original_files {
            let sidecar = sidecar_path(file);
            let rows = if sidecar != *file && sidecar.is_file() {
                read_sidecar(&sidecar).map_err(|e| fail("MALFORMED_SIDECAR", format!("{}: {e}", sidecar.display())))?
            } else {
                Vec::new()
            };
            csv_sidecar_rows.push(rows);
        }
        Ok(DataPackage {
            order: order.clone(),
            target_files: original_files.clone(),
            original_files,
            converted_file: None,
            remote_converted_file: None,
            harvested_metadata: BTreeMap::new(),
            csv_sidecar_rows,
            workdir: workdir.to_path_buf(),
            started_at: self.db.database().now(),
        })
    }

    fn preprocess(&self, package: &mut DataPackage) -> Result<(), StepFailure> {
        let Some(spec) = package.order.preprocessing.clone() else {
            return Ok(());
        };
        let fail = |code: &str, detail: String| StepFailure::new(ImportStep::Preprocess, code, detail);
        self.db
            .update_order_status(&package.order.uuid, OrderStatus::Preprocessing, None)
            .map_err(|e| fail(e.code(), e.to_string()))?;

        let input = package.original_files[0].clone();
        let remote_out = input.parent().unwrap_or(Path::new("")).join(&spec.output_subfolder_name);
        let started = Instant::now();
        let result = self.runner.run(&spec, &input, &package.workdir, &remote_out);
        let journal = ContainerRunRecord {
            order_uuid: package.order.uuid.clone(),
            container_ref: spec.container_ref.clone(),
            input: input.to_string_lossy().into_owned(),
            exit_code: match &result {
                Ok(r) => r.exit_code,
                Err(e) => e.exit_code(),
            },
            duration_ms: started.elapsed().as_millis() as u64,
            at: self.db.database().now(),
        };
        self.db.record_container_run(&journal).map_err(|e| fail(e.code(), e.to_string()))?;
        let result = result.map_err(|e| fail(e.code(), e.to_string()))?;

        package.harvested_metadata = result.metadata;
        if let (Some(local), Some(remote)) = (result.converted_file, result.remote_converted_file) {
            if spec.alters_target {
                package.target_files = vec![local.clone()];
                package.converted_file = Some(local);
                package.remote_converted_file = Some(remote);
            } else {
                let _ = fs::remove_file(&local);
            }
        }
        Ok(())
    }

    fn import(&self, package: &DataPackage) -> Result<(u64, Vec<u64>), StepFailure> {
        let order = &package.order;
        let fail = |code: &str, detail: String| StepFailure::new(ImportStep::Import, code, detail);
        let destination_id = match order.destination_type {
            DestinationType::Dataset => order.destination_id,
            DestinationType::Screen => {
                let plate_name = package.order.file_names[0].clone();
                self.repo
                    .create_object(
                        NewObject::new(ObjectKind::Plate, plate_name, order.username.clone(), order.group.clone())
                            .under(order.destination_id),
                    )
                    .map_err(|e| fail(e.code(), e.to_string()))?
                    .id
            }
        };
        let image_names = package
            .target_files
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let (fileset, image_ids) = self
            .repo
            .register_fileset(FilesetRequest {
                image_names,
                destination_id,
                targets: package.target_files.clone(),
                transfer_mode: TransferMode::InPlace,
                owner: order.username.clone(),
                group: order.group.clone(),
            })
            .map_err(|e| fail(e.code(), e.to_string()))?;
        Ok((fileset.id, image_ids))
    }

    fn redirect(&self, package: &DataPackage, fileset_id: u64) -> Result<(), StepFailure> {
        let (Some(local), Some(remote)) = (&package.converted_file, &package.remote_converted_file) else {
            return Ok(());
        };
        let fail = |code: &str, detail: String| StepFailure::new(ImportStep::Redirect, code, detail);
        let fileset = self
            .repo
            .get_fileset(fileset_id)
            .map_err(|e| fail(e.code(), e.to_string()))?
            .ok_or_else(|| fail("UNKNOWN_FILESET", fileset_id.to_string()))?;
        for entry in fileset.entries.iter().filter(|e| e.target_path.starts_with(&package.workdir)) {
            self.repo
                .retarget_fileset_entry(fileset_id, &entry.link_path, remote)
                .map_err(|e| fail(e.code(), e.to_string()))?;
        }
        fs::remove_file(local).map_err(|e| fail("IO_ERROR", e.to_string()))?;
        Ok(())
    }

    pub fn import_metadata_pairs(&self, package: &DataPackage, imported_at: Timestamp) -> Vec<(String, String)> {
        let order = &package.order;
        let added_by = self.config.display_names.get(&order.username).cloned().unwrap_or_else(|| order.username.clone());
        let originals: Vec<String> = package.original_files.iter().map(|p| p.to_string_lossy().into_owned()).collect();
        vec![
            ("Added by".to_string(), added_by),
            ("UUID".to_string(), order.uuid.clone()),
            ("Filepath".to_string(), originals[0].clone()),
            ("Group".to_string(), order.group.clone()),
            ("Username".to_string(), order.username.clone()),
            ("DestinationID".to_string(), order.destination_id.to_string()),
            ("DestinationType".to_string(), order.destination_type.to_string()),
            ("Files".to_string(), bracket_list(&originals)),
            ("FileNames".to_string(), bracket_list(&order.file_names)),
            ("Import_Timestamp".to_string(), imported_at.to_string()),
        ]
    }

    pub fn attach_import_metadata(&self, package: &DataPackage, image_ids: &[u64]) -> Result<(), crate::repo::RepoError> {
        let pairs = self.import_metadata_pairs(package, self.db.database().now());
        for (index, &image_id) in image_ids.iter().enumerate() {
            self.repo.annotate(image_id, IMPORT_NAMESPACE, pairs.clone())?;
            if let Some(spec) = &package.order.preprocessing {
                let mut block = vec![("container_ref".to_string(), spec.container_ref.clone())];
                block.extend(
                    package.harvested_metadata.iter().filter(|(k, _)| *k != "container_ref").map(|(k, v)| (k.clone(), v.clone())),
                );
                self.repo.annotate(image_id, PREPROCESSING_NAMESPACE, block)?;
            }
            let rows = package.sidecar_rows_for(index);
            if !rows.is_empty() {
                self.repo.annotate(image_id, CSV_NAMESPACE, rows)?;
            }
        }
        Ok(())
    }
}

struct Shared {
    stop: AtomicBool,
    wake: (Mutex<()>, Condvar),
}

/// Running worker pool. Dropping the handle without calling
/// [`shutdown`](DaemonHandle::shutdown) detaches the workers.
pub struct DaemonHandle {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl DaemonHandle {
    /// Stops claiming new orders, lets in-flight orders finish, then joins.
    pub fn shutdown(self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.wake.1.notify_all();
        for worker in self.workers {
            let _ = worker.join();
        }
    }

    /// Wakes idle workers so they poll immediately.
    pub fn nudge(&self) {
        self.shared.wake.1.notify_all();
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }
}

/// Starts `config.workers` threads that claim and process orders.
pub fn run_daemon(importer: Importer) -> Result<DaemonHandle, ImporterError> {
    importer.check_config()?;
    let shared = Arc::new(Shared { stop: AtomicBool::new(false), wake: (Mutex::new(()), Condvar::new()) });
    let importer = Arc::new(importer);
    let mut workers = Vec::new();
    for n in 0..importer.config.workers {
        let importer = importer.clone();
        let shared = shared.clone();
        let worker_id = format!("worker-{n}");
        let handle = thread::Builder::new()
            .name(worker_id.clone())
            .spawn(move || worker_loop(&importer, &shared, &worker_id))
            .map_err(|e| ImporterError::FatalConfig(format!("cannot spawn worker: {e}")))?;
        workers.push(handle);
    }
    tracing::info!(workers = workers.len(), "importer started");
    Ok(DaemonHandle { shared, workers })
}

fn worker_loop(importer: &Importer, shared: &Shared, worker_id: &str) {
    while !shared.stop.load(Ordering::SeqCst) {
        match importer.process_next(worker_id) {
            Ok(Some(_)) => continue,
            Ok(None) => {}
            Err(err) => tracing::error!(worker = worker_id, error = %err, "claim failed"),
        }
        let guard = shared.wake.0.lock().unwrap_or_else(|p| p.into_inner());
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let _ = shared.wake.1.wait_timeout(guard, importer.config.poll_interval);
    }
}
