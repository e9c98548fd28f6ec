//! Preprocessing container execution.
//!
//! A container receives the directory of its input file mounted read-only at
//! `/data/in` and a private work directory mounted read-write at `/data/out`.
//! It is invoked as
//!
//! ```text
//! <image> --inputfile /data/in/<name> --outputfolder /data/out [--<key> <value>]...
//! ```
//!
//! and reports back through `/data/out/result.json`:
//!
//! ```json
//! { "converted_file": "experiment.ome.tiff", "metadata": { "converter_version": "v0.1.0" } }
//! ```
//!
//! Both fields are optional; unknown fields are ignored. A converted file is
//! copied next to the input on the remote tree, into the order's output
//! subfolder.

mod mock;
mod shell;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use mock::{MockBackend, MockBehavior};
pub use shell::{ShellBackend, DEFAULT_TEMPLATE as DEFAULT_SHELL_TEMPLATE};

pub const CONTAINER_INPUT_DIR: &str = "/data/in";
pub const CONTAINER_OUTPUT_DIR: &str = "/data/out";
pub const RESULT_FILE: &str = "result.json";
pub const DEFAULT_OUTPUT_SUBFOLDER: &str = "_converted";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30 * 60);

fn default_subfolder() -> String {
    DEFAULT_OUTPUT_SUBFOLDER.to_string()
}

fn default_alters_target() -> bool {
    true
}

/// Preprocessing settings attached to an import order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessingSpec {
    pub container_ref: String,
    #[serde(default)]
    pub extra_args: BTreeMap<String, String>,
    #[serde(default = "default_subfolder")]
    pub output_subfolder_name: String,
    #[serde(default = "default_alters_target")]
    pub alters_target: bool,
}

impl PreprocessingSpec {
    pub fn new(container_ref: impl Into<String>) -> Self {
        PreprocessingSpec {
            container_ref: container_ref.into(),
            extra_args: BTreeMap::new(),
            output_subfolder_name: default_subfolder(),
            alters_target: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpecViolation {
    EmptyReference,
    MissingTag,
    FloatingTag,
    NestedSubfolder,
    InvalidSubfolder,
}

/// How an image reference is pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagePin<'a> {
    Tag(&'a str),
    Digest(&'a str),
    Unpinned,
}

/// Splits the tag or digest off an image reference such as
/// `registry:5000/org/name:v1.2.0` or `org/name@sha256:...`.
pub fn image_pin(reference: &str) -> ImagePin<'_> {
    if let Some((_, digest)) = reference.split_once('@') {
        return if digest.is_empty() { ImagePin::Unpinned } else { ImagePin::Digest(digest) };
    }
    let last = reference.rsplit('/').next().unwrap_or(reference);
    match last.rsplit_once(':') {
        Some((name, tag)) if !name.is_empty() && is_valid_tag(tag) => ImagePin::Tag(tag),
        _ => ImagePin::Unpinned,
    }
}

fn is_valid_tag(tag: &str) -> bool {
    let mut chars = tag.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphanumeric() || c == '_' => {}
        _ => return false,
    }
    tag.len() <= 128 && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

/// True when the reference carries an explicit, non-floating version.
pub fn is_version_pinned(reference: &str) -> bool {
    match image_pin(reference) {
        ImagePin::Tag(tag) => tag != "latest",
        ImagePin::Digest(_) => true,
        ImagePin::Unpinned => false,
    }
}

pub fn is_single_segment(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\'])
}

pub fn validate_spec(spec: &PreprocessingSpec) -> Vec<SpecViolation> {
    let mut violations = Vec::new();
    if spec.container_ref.trim().is_empty() {
        violations.push(SpecViolation::EmptyReference);
    } else {
        match image_pin(&spec.container_ref) {
            ImagePin::Tag("latest") => violations.push(SpecViolation::FloatingTag),
            ImagePin::Unpinned => violations.push(SpecViolation::MissingTag),
            _ => {}
        }
    }
    let sub = &spec.output_subfolder_name;
    if sub.contains(['/', '\\']) {
        violations.push(SpecViolation::NestedSubfolder);
    } else if !is_single_segment(sub) {
        violations.push(SpecViolation::InvalidSubfolder);
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerResult {
    pub exit_code: i32,
    /// Converted file inside the local work directory.
    pub converted_file: Option<PathBuf>,
    /// Copy of the converted file on the remote tree.
    pub remote_converted_file: Option<PathBuf>,
    pub metadata: BTreeMap<String, String>,
    pub stdout_log: String,
    pub stderr_log: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("preprocessing spec rejected: {0:?}")]
    InvalidSpec(Vec<SpecViolation>),
    #[error("input file {0} does not exist")]
    InputMissing(PathBuf),
    #[error("container exited with code {exit_code}")]
    NonzeroExit { exit_code: i32, stdout: String, stderr: String },
    #[error("container wrote no result.json")]
    ResultJsonMissing,
    #[error("result.json is malformed: {0}")]
    ResultJsonMalformed(String),
    #[error("declared converted file {0} is missing")]
    ConvertedFileMissing(PathBuf),
    #[error("container exceeded timeout of {0:?}")]
    Timeout(Duration),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunnerError {
    pub fn code(&self) -> &'static str {
        match self {
            RunnerError::InvalidSpec(_) => "INVALID_SPEC",
            RunnerError::InputMissing(_) => "INPUT_MISSING",
            RunnerError::NonzeroExit { .. } => "CONTAINER_NONZERO_EXIT",
            RunnerError::ResultJsonMissing => "RESULT_JSON_MISSING",
            RunnerError::ResultJsonMalformed(_) => "RESULT_JSON_MALFORMED",
            RunnerError::ConvertedFileMissing(_) => "CONVERTED_FILE_MISSING",
            RunnerError::Timeout(_) => "CONTAINER_TIMEOUT",
            RunnerError::Backend(_) => "BACKEND_FAILURE",
            RunnerError::Io(_) => "IO_ERROR",
        }
    }

    /// Exit code to journal for a failed run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::NonzeroExit { exit_code, .. } => *exit_code,
            _ => -1,
        }
    }
}

/// One container execution request, with host-side mount sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub image: String,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl Invocation {
    /// Maps a path as seen inside the container to the host path.
    pub fn host_path(&self, container_path: &str) -> Option<PathBuf> {
        let map = |prefix: &str, host: &Path| {
            container_path
                .strip_prefix(prefix)
                .map(|rest| host.join(rest.trim_start_matches('/')))
        };
        map(CONTAINER_INPUT_DIR, &self.input_dir).or_else(|| map(CONTAINER_OUTPUT_DIR, &self.output_dir))
    }

    pub fn arg_value(&self, flag: &str) -> Option<&str> {
        self.args
            .iter()
            .position(|a| a == flag)
            .and_then(|i| self.args.get(i + 1))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackendOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub trait ContainerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn invoke(&self, invocation: &Invocation) -> Result<BackendOutput, RunnerError>;
}

/// Builds the canonical argument list for `input_name`.
pub fn canonical_args(spec: &PreprocessingSpec, input_name: &str) -> Vec<String> {
    let mut args = vec![
        "--inputfile".to_string(),
        format!("{CONTAINER_INPUT_DIR}/{input_name}"),
        "--outputfolder".to_string(),
        CONTAINER_OUTPUT_DIR.to_string(),
    ];
    for (key, value) in &spec.extra_args {
        args.push(format!("--{key}"));
        args.push(value.clone());
    }
    args
}

#[derive(Debug, Default, Deserialize)]
struct ResultDocument {
    converted_file: Option<String>,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone)]
pub struct ContainerRunner {
    backend: Arc<dyn ContainerBackend>,
    timeout: Duration,
}

impl std::fmt::Debug for ContainerRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContainerRunner")
            .field("backend", &self.backend.name())
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ContainerRunner {
    pub fn new(backend: Arc<dyn ContainerBackend>) -> Self {
        ContainerRunner { backend, timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn run(
        &self,
        spec: &PreprocessingSpec,
        input_file: &Path,
        local_workdir: &Path,
        remote_output_dir: &Path,
    ) -> Result<ContainerResult, RunnerError> {
        let violations = validate_spec(spec);
        if !violations.is_empty() {
            return Err(RunnerError::InvalidSpec(violations));
        }
        if !input_file.is_file() {
            return Err(RunnerError::InputMissing(input_file.to_path_buf()));
        }
        let (input_dir, input_name) = match (input_file.parent(), input_file.file_name()) {
            (Some(dir), Some(name)) => (dir.to_path_buf(), name.to_string_lossy().into_owned()),
            _ => return Err(RunnerError::InputMissing(input_file.to_path_buf())),
        };
        fs::create_dir_all(local_workdir)?;

        let invocation = Invocation {
            image: spec.container_ref.clone(),
            input_dir,
            output_dir: local_workdir.to_path_buf(),
            args: canonical_args(spec, &input_name),
            timeout: self.timeout,
        };
        let output = self.backend.invoke(&invocation)?;
        if output.exit_code != 0 {
            return Err(RunnerError::NonzeroExit {
                exit_code: output.exit_code,
                stdout: output.stdout,
                stderr: output.stderr,
            });
        }

        let result_path = local_workdir.join(RESULT_FILE);
        let raw = match fs::read(&result_path) {
            Ok(raw) => raw,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
                return Err(RunnerError::ResultJsonMissing)
            }
            Err(err) => return Err(err.into()),
        };
        // result.json is consumed; the work directory should only hold outputs.
        fs::remove_file(&result_path)?;
        let doc: ResultDocument = serde_json::from_slice(&raw)
            .map_err(|err| RunnerError::ResultJsonMalformed(err.to_string()))?;

        let mut metadata = BTreeMap::new();
        for (key, value) in doc.metadata {
            let text = match value {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => {
                    return Err(RunnerError::ResultJsonMalformed(format!(
                        "metadata value for {key:?} is not a scalar: {other}"
                    )))
                }
            };
            metadata.insert(key, text);
        }

        let (converted_file, remote_converted_file) = match doc.converted_file {
            None => (None, None),
            Some(rel) => {
                let rel_path = Path::new(&rel);
                let rel_path = rel_path.strip_prefix(CONTAINER_OUTPUT_DIR).unwrap_or(rel_path);
                if rel_path.as_os_str().is_empty()
                    || rel_path.components().any(|c| !matches!(c, Component::Normal(_)))
                {
                    return Err(RunnerError::ResultJsonMalformed(format!(
                        "converted_file {rel:?} escapes the output folder"
                    )));
                }
                let local = local_workdir.join(rel_path);
                if !local.is_file() {
                    return Err(RunnerError::ConvertedFileMissing(local));
                }
                fs::create_dir_all(remote_output_dir)?;
                let remote = remote_output_dir.join(local.file_name().expect("normal component"));
                fs::copy(&local, &remote)?;
                (Some(local), Some(remote))
            }
        };

        Ok(ContainerResult {
            exit_code: output.exit_code,
            converted_file,
            remote_converted_file,
            metadata,
            stdout_log: output.stdout,
            stderr_log: output.stderr,
        })
    }

    /// Runs the no-op probe image against a scratch file. Used by setup checks.
    pub fn probe(&self, scratch: &Path) -> Result<ContainerResult, RunnerError> {
        let input = scratch.join("probe-input.txt");
        fs::create_dir_all(scratch)?;
        fs::write(&input, b"probe")?;
        let out = scratch.join("out");
        let result = self.run(&PreprocessingSpec::new("probe:v1"), &input, &out, &scratch.join("remote"));
        let _ = fs::remove_dir_all(&out);
        let _ = fs::remove_file(&input);
        result
    }
}
