//! Workflow definitions persisted in an INI file (`slurm-config.ini`).
//!
//! Workflows live in the `[MODELS]` section as
//!
//! ```ini
//! cellpose=cellpose
//! cellpose_repo=https://github.com/TorecLuik/W_NucleiSegmentation-Cellpose/tree/v1.3.1
//! cellpose_image=cellpose:v1.3.1
//! cellpose_job=jobs/cellpose.sh
//! cellpose_job_partition=gpu
//! cellpose_description=Cellpose nuclei segmentation
//! cellpose_param_diameter={"type":"int","default":0,"description":"..."}
//! ```
//!
//! All other sections are carried through untouched.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use ini::{EscapePolicy, Ini, LineSeparator, ParseOption, WriteOption};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::runner::is_version_pinned;

pub const MODELS_SECTION: &str = "MODELS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Int,
    Float,
    Bool,
    Enum,
    String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub param_type: ParamType,
    pub default: Value,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

impl ParamSpec {
    pub fn new(name: &str, param_type: ParamType, default: Value, description: &str) -> Self {
        ParamSpec { name: name.into(), param_type, default, description: description.into(), options: Vec::new() }
    }

    pub fn with_options(mut self, options: &[&str]) -> Self {
        self.options = options.iter().map(|o| o.to_string()).collect();
        self
    }

    /// Normalized value if `value` fits this parameter.
    pub fn coerce(&self, value: &Value) -> Option<Value> {
        match self.param_type {
            ParamType::Int => value.as_i64().map(Value::from),
            ParamType::Float => value.as_f64().filter(|f| f.is_finite()).map(Value::from),
            ParamType::Bool => value.as_bool().map(Value::from),
            ParamType::String => value.as_str().map(Value::from),
            ParamType::Enum => value.as_str().filter(|s| self.options.iter().any(|o| o == s)).map(Value::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDefinition {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub github_repo: String,
    pub container_image: String,
    #[serde(default)]
    pub job_script: String,
    #[serde(default)]
    pub sbatch_params: IndexMap<String, String>,
    #[serde(default)]
    pub param_schema: Vec<ParamSpec>,
}

impl WorkflowDefinition {
    pub fn new(name: &str, description: &str, github_repo: &str, container_image: &str) -> Self {
        WorkflowDefinition {
            name: name.into(),
            description: description.into(),
            github_repo: github_repo.into(),
            container_image: container_image.into(),
            job_script: default_job_script(name),
            sbatch_params: IndexMap::new(),
            param_schema: Vec::new(),
        }
    }

    /// Release tag taken from the repository URL.
    pub fn version(&self) -> Option<&str> {
        repo_tag(&self.github_repo)
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.param_schema.iter().find(|p| p.name == name)
    }
}

pub fn default_job_script(name: &str) -> String {
    format!("jobs/{name}.sh")
}

/// Tag of `https://github.com/<org>/<repo>/tree/<tag>` or
/// `https://github.com/<org>/<repo>/releases/tag/<tag>`. A tag must contain a
/// digit so branch names such as `main` are not accepted as releases.
pub fn repo_tag(url: &str) -> Option<&str> {
    let rest = url.strip_prefix("https://github.com/")?.trim_end_matches('/');
    let parts: Vec<&str> = rest.split('/').collect();
    let tag = match parts.as_slice() {
        [org, repo, "tree", tag] if !org.is_empty() && !repo.is_empty() => *tag,
        [org, repo, "releases", "tag", tag] if !org.is_empty() && !repo.is_empty() => *tag,
        _ => return None,
    };
    (tag.chars().any(|c| c.is_ascii_digit()) && !tag.chars().any(char::is_whitespace)).then_some(tag)
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("repository URL {0:?} does not point at a released version")]
    InvalidRepoUrl(String),
    #[error("container image {0:?} has no version tag")]
    UntaggedImage(String),
    #[error("workflow {0:?} already registered")]
    DuplicateName(String),
    #[error("invalid workflow name {0:?}: use letters and digits only")]
    InvalidName(String),
    #[error("invalid parameter {name:?}: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("unknown workflow {0:?}")]
    UnknownWorkflow(String),
    #[error("malformed analyzer config: {0}")]
    MalformedConfig(String),
    #[error("cannot write analyzer config: {0}")]
    Io(#[from] std::io::Error),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::InvalidRepoUrl(_) => "INVALID_REPO_URL",
            RegistryError::UntaggedImage(_) => "UNTAGGED_IMAGE",
            RegistryError::DuplicateName(_) => "DUPLICATE_NAME",
            RegistryError::InvalidName(_) => "INVALID_NAME",
            RegistryError::InvalidParam { .. } => "INVALID_PARAM",
            RegistryError::UnknownWorkflow(_) => "UNKNOWN_WORKFLOW",
            RegistryError::MalformedConfig(_) => "MALFORMED_CONFIG",
            RegistryError::Io(_) => "IO_ERROR",
        }
    }
}

/// Checks a definition without consulting the registry.
pub fn validate_definition(def: &WorkflowDefinition) -> Result<(), RegistryError> {
    if def.name.is_empty() || !def.name.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(RegistryError::InvalidName(def.name.clone()));
    }
    if repo_tag(&def.github_repo).is_none() {
        return Err(RegistryError::InvalidRepoUrl(def.github_repo.clone()));
    }
    if !is_version_pinned(&def.container_image) {
        return Err(RegistryError::UntaggedImage(def.container_image.clone()));
    }
    let mut seen = std::collections::HashSet::new();
    for p in &def.param_schema {
        let bad = |reason: &str| RegistryError::InvalidParam { name: p.name.clone(), reason: reason.into() };
        if p.name.is_empty() || !p.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad("names use letters, digits and underscores"));
        }
        if !seen.insert(p.name.as_str()) {
            return Err(bad("declared twice"));
        }
        if p.param_type == ParamType::Enum && p.options.is_empty() {
            return Err(bad("enum needs options"));
        }
        if p.coerce(&p.default).is_none() {
            return Err(bad("default does not match the type"));
        }
    }
    if let Some(k) = def.sbatch_params.keys().find(|k| k.is_empty() || k.contains(char::is_whitespace)) {
        return Err(RegistryError::InvalidParam { name: k.clone(), reason: "bad sbatch parameter name".into() });
    }
    Ok(())
}

/// Ordered sections of the analyzer config file.
pub type ConfigSections = IndexMap<String, IndexMap<String, String>>;

fn parse_ini(text: &str) -> Result<ConfigSections, RegistryError> {
    let opt = ParseOption { enabled_quote: false, enabled_escape: true, ..ParseOption::default() };
    let ini = Ini::load_from_str_opt(text, opt).map_err(|e| RegistryError::MalformedConfig(e.to_string()))?;
    let mut sections = ConfigSections::new();
    for (name, props) in ini.iter() {
        let Some(name) = name else {
            if !props.is_empty() {
                return Err(RegistryError::MalformedConfig("keys outside any section".into()));
            }
            continue;
        };
        let entry = sections.entry(name.to_string()).or_default();
        for (k, v) in props.iter() {
            entry.insert(k.to_string(), v.to_string());
        }
    }
    Ok(sections)
}

pub fn render_ini(sections: &ConfigSections) -> String {
    let mut ini = Ini::new();
    for (name, props) in sections {
        ini.entry(Some(name.clone())).or_insert_with(Default::default);
        for (k, v) in props {
            ini.with_section(Some(name.as_str())).set(k.as_str(), v.as_str());
        }
    }
    let mut out = Vec::new();
    let opt = WriteOption { escape_policy: EscapePolicy::Basics, line_separator: LineSeparator::CR, ..WriteOption::default() };
    ini.write_to_opt(&mut out, opt).expect("writing to memory");
    String::from_utf8(out).expect("ini output is utf-8")
}

/// Workflows declared in the `[MODELS]` section, in declaration order.
pub fn workflows_from_sections(sections: &ConfigSections) -> Result<Vec<WorkflowDefinition>, RegistryError> {
    let Some(models) = sections.get(MODELS_SECTION) else {
        return Ok(Vec::new());
    };
    let mut defs = Vec::new();
    for (key, value) in models {
        if key.contains('_') || key != value {
            continue;
        }
        let get = |suffix: &str| models.get(&format!("{key}_{suffix}")).cloned();
        let mut def = WorkflowDefinition {
            name: key.clone(),
            description: get("description").unwrap_or_default(),
            github_repo: get("repo").unwrap_or_default(),
            container_image: get("image").unwrap_or_default(),
            job_script: get("job").unwrap_or_else(|| default_job_script(key)),
            sbatch_params: IndexMap::new(),
            param_schema: Vec::new(),
        };
        let job_prefix = format!("{key}_job_");
        let param_prefix = format!("{key}_param_");
        for (k, v) in models {
            if let Some(sbatch_key) = k.strip_prefix(&job_prefix) {
                def.sbatch_params.insert(sbatch_key.to_string(), v.clone());
            } else if let Some(param) = k.strip_prefix(&param_prefix) {
                let mut doc: serde_json::Map<String, Value> = serde_json::from_str(v)
                    .map_err(|e| RegistryError::MalformedConfig(format!("{k}: {e}")))?;
                doc.insert("name".into(), Value::from(param));
                let spec: ParamSpec = serde_json::from_value(Value::Object(doc))
                    .map_err(|e| RegistryError::MalformedConfig(format!("{k}: {e}")))?;
                def.param_schema.push(spec);
            }
        }
        defs.push(def);
    }
    Ok(defs)
}

fn write_definition(models: &mut IndexMap<String, String>, def: &WorkflowDefinition) {
    let name = &def.name;
    models.insert(name.clone(), name.clone());
    models.insert(format!("{name}_repo"), def.github_repo.clone());
    models.insert(format!("{name}_image"), def.container_image.clone());
    models.insert(format!("{name}_job"), def.job_script.clone());
    for (k, v) in &def.sbatch_params {
        models.insert(format!("{name}_job_{k}"), v.clone());
    }
    models.insert(format!("{name}_description"), def.description.clone());
    for p in &def.param_schema {
        let mut doc = serde_json::to_value(p).expect("param spec serializes");
        doc.as_object_mut().expect("object").shift_remove("name");
        models.insert(format!("{name}_param_{}", p.name), doc.to_string());
    }
}

fn remove_definition(models: &mut IndexMap<String, String>, name: &str) {
    let prefix = format!("{name}_");
    models.retain(|k, _| k != name && !k.starts_with(&prefix));
}

/// Values written to the file are trimmed by the INI format, so definitions
/// are normalized the same way before they are stored.
fn normalize(mut def: WorkflowDefinition) -> WorkflowDefinition {
    def.description = def.description.trim().to_string();
    def.github_repo = def.github_repo.trim().to_string();
    def.container_image = def.container_image.trim().to_string();
    def.job_script = match def.job_script.trim() {
        "" => default_job_script(&def.name),
        s => s.to_string(),
    };
    def.sbatch_params = def.sbatch_params.into_iter().map(|(k, v)| (k, v.trim().to_string())).collect();
    def
}

#[derive(Debug, Clone)]
pub struct WorkflowRegistry {
    path: Option<PathBuf>,
    sections: Arc<Mutex<ConfigSections>>,
}

impl WorkflowRegistry {
    pub fn in_memory() -> Self {
        WorkflowRegistry { path: None, sections: Arc::new(Mutex::new(ConfigSections::new())) }
    }

    /// Loads `path`, or starts empty when the file does not exist yet.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let path = path.into();
        let sections = match fs::read_to_string(&path) {
            Ok(text) => parse_ini(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ConfigSections::new(),
            Err(e) => return Err(e.into()),
        };
        workflows_from_sections(&sections)?;
        Ok(WorkflowRegistry { path: Some(path), sections: Arc::new(Mutex::new(sections)) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ConfigSections> {
        self.sections.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, sections: &ConfigSections) -> Result<(), RegistryError> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let tmp = path.with_extension("ini.tmp");
            fs::write(&tmp, render_ini(sections))?;
            fs::rename(&tmp, path)?;
        }
        Ok(())
    }

    pub fn register(&self, def: WorkflowDefinition) -> Result<WorkflowDefinition, RegistryError> {
        let def = normalize(def);
        validate_definition(&def)?;
        let mut sections = self.lock();
        if workflows_from_sections(&sections)?.iter().any(|d| d.name == def.name) {
            return Err(RegistryError::DuplicateName(def.name));
        }
        let mut next = sections.clone();
        write_definition(next.entry(MODELS_SECTION.to_string()).or_default(), &def);
        self.persist(&next)?;
        *sections = next;
        Ok(def)
    }

    pub fn update(&self, name: &str, def: WorkflowDefinition) -> Result<WorkflowDefinition, RegistryError> {
        let def = normalize(def);
        validate_definition(&def)?;
        let mut sections = self.lock();
        let existing = workflows_from_sections(&sections)?;
        if !existing.iter().any(|d| d.name == name) {
            return Err(RegistryError::UnknownWorkflow(name.to_string()));
        }
        if def.name != name && existing.iter().any(|d| d.name == def.name) {
            return Err(RegistryError::DuplicateName(def.name));
        }
        let mut next = sections.clone();
        let models = next.entry(MODELS_SECTION.to_string()).or_default();
        remove_definition(models, name);
        write_definition(models, &def);
        self.persist(&next)?;
        *sections = next;
        Ok(def)
    }

    /// Workflows whose name or description contains `filter` (case-insensitive).
    pub fn list(&self, filter: Option<&str>) -> Result<Vec<WorkflowDefinition>, RegistryError> {
        let all = workflows_from_sections(&self.lock())?;
        let Some(needle) = filter.map(str::to_lowercase).filter(|f| !f.is_empty()) else {
            return Ok(all);
        };
        Ok(all
            .into_iter()
            .filter(|d| d.name.to_lowercase().contains(&needle) || d.description.to_lowercase().contains(&needle))
            .collect())
    }

    pub fn get(&self, name: &str) -> Result<WorkflowDefinition, RegistryError> {
        self.list(None)?
            .into_iter()
            .find(|d| d.name == name)
            .ok_or_else(|| RegistryError::UnknownWorkflow(name.to_string()))
    }

    pub fn render_param_form(&self, name: &str) -> Result<Vec<ParamSpec>, RegistryError> {
        Ok(self.get(name)?.param_schema)
    }

    pub fn sections(&self) -> ConfigSections {
        self.lock().clone()
    }

    /// Replaces the whole config; every workflow in it must validate.
    pub fn replace_sections(&self, sections: ConfigSections) -> Result<(), RegistryError> {
        let defs = workflows_from_sections(&sections)?;
        let mut names = std::collections::HashSet::new();
        for def in &defs {
            validate_definition(def)?;
            if !names.insert(def.name.as_str()) {
                return Err(RegistryError::DuplicateName(def.name.clone()));
            }
        }
        let mut current = self.lock();
        self.persist(&sections)?;
        *current = sections;
        Ok(())
    }

    pub fn to_ini(&self) -> String {
        render_ini(&self.lock())
    }

    /// Parses `text` as a full config file and replaces the current one.
    pub fn replace_from_ini(&self, text: &str) -> Result<(), RegistryError> {
        self.replace_sections(parse_ini(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    pub(crate) fn cellpose() -> WorkflowDefinition {
        let mut def = WorkflowDefinition::new(
            "cellpose",
            "Cellpose nuclei segmentation",
            "https://github.com/TorecLuik/W_NucleiSegmentation-Cellpose/tree/v1.3.1",
            "torecluik/w_nucleisegmentation-cellpose:v1.3.1",
        );
        def.sbatch_params.insert("partition".into(), "gpu".into());
        def.param_schema = vec![
            ParamSpec::new("nuc_channel", ParamType::Int, json!(3), "Channel with nuclei"),
            ParamSpec::new("use_gpu", ParamType::Bool, json!(false), "Run on GPU"),
        ];
        def
    }

    #[test]
    fn repo_urls() {
        assert_eq!(repo_tag("https://github.com/org/wf/tree/v1.3.1"), Some("v1.3.1"));
        assert_eq!(repo_tag("https://github.com/org/wf/releases/tag/v2.0"), Some("v2.0"));
        assert_eq!(repo_tag("https://github.com/org/wf"), None);
        assert_eq!(repo_tag("https://github.com/org/wf/tree/main"), None);
        assert_eq!(repo_tag("http://github.com/org/wf/tree/v1"), None);
    }

    #[test]
    fn register_rules() {
        let reg = WorkflowRegistry::in_memory();
        reg.register(cellpose()).unwrap();
        assert_eq!(reg.register(cellpose()).unwrap_err().code(), "DUPLICATE_NAME");
        let mut bad = cellpose();
        bad.name = "wf".into();
        bad.github_repo = "https://github.com/org/wf".into();
        assert_eq!(reg.register(bad.clone()).unwrap_err().code(), "INVALID_REPO_URL");
        bad.github_repo = "https://github.com/org/wf/tree/v1".into();
        bad.container_image = "org/wf:latest".into();
        assert_eq!(reg.register(bad).unwrap_err().code(), "UNTAGGED_IMAGE");
    }

    #[test]
    fn ini_layout_and_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("slurm-config.ini");
        let reg = WorkflowRegistry::open(&path).unwrap();
        let stored = reg.register(cellpose()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("[MODELS]"));
        assert!(text.contains("cellpose_repo=https://github.com/TorecLuik/W_NucleiSegmentation-Cellpose/tree/v1.3.1"));
        assert!(text.contains("cellpose_job_partition=gpu"));
        let reloaded = WorkflowRegistry::open(&path).unwrap();
        assert_eq!(reloaded.list(None).unwrap(), vec![stored]);
    }

    #[test]
    fn other_sections_survive() {
        let reg = WorkflowRegistry::in_memory();
        reg.replace_from_ini("[SSH]\nhost=localslurm\n[CONVERTERS]\nconvert_zarr_to_tiff=cellularimagingcf/convert_zarr_to_tiff:1.14.0\n")
            .unwrap();
        reg.register(cellpose()).unwrap();
        let sections = reg.sections();
        assert_eq!(sections.keys().collect::<Vec<_>>(), ["SSH", "CONVERTERS", "MODELS"]);
        assert_eq!(sections["SSH"]["host"], "localslurm");
    }

    #[test]
    fn filter_matches_description() {
        let reg = WorkflowRegistry::in_memory();
        reg.register(cellpose()).unwrap();
        let mut other = cellpose();
        other.name = "spotcount".into();
        other.description = "Counts spots".into();
        reg.register(other).unwrap();
        let hits = reg.list(Some("segmentation")).unwrap();
        assert_eq!(hits.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(), ["cellpose"]);
    }
}
