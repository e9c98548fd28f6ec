//! TOML configuration with `FAIRFLOW_<SECTION>_<KEY>` environment overrides.
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::principal::Principal;

pub const ENV_PREFIX: &str = "FAIRFLOW_";
/// Variables read by the command line itself, not config overrides.
pub const RESERVED_ENV: [&str; 2] = ["FAIRFLOW_CONFIG", "FAIRFLOW_TOKEN"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        "FATAL_CONFIG"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbSection {
    pub path: PathBuf,
}

impl Default for DbSection {
    fn default() -> Self {
        DbSection { path: "fairflow.db".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepoSection {
    pub managed_root: PathBuf,
    pub remote_root: PathBuf,
}

impl Default for RepoSection {
    fn default() -> Self {
        RepoSection { managed_root: "ManagedRepository".into(), remote_root: "remote".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImporterSection {
    pub workers: usize,
    pub poll_interval_ms: u64,
    pub local_workdir: PathBuf,
    pub display_names: BTreeMap<String, String>,
}

impl Default for ImporterSection {
    fn default() -> Self {
        ImporterSection {
            workers: 4,
            poll_interval_ms: 2000,
            local_workdir: "work".into(),
            display_names: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Shell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunnerSection {
    pub backend: BackendKind,
    pub template: String,
    pub timeout_secs: u64,
}

impl Default for RunnerSection {
    fn default() -> Self {
        RunnerSection {
            backend: BackendKind::Mock,
            template: crate::runner::DEFAULT_SHELL_TEMPLATE.to_string(),
            timeout_secs: crate::runner::DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzerSection {
    pub config_file: PathBuf,
    pub work_root: PathBuf,
    pub poll_interval_ms: u64,
    pub convert_extensions: Vec<String>,
}

impl Default for AnalyzerSection {
    fn default() -> Self {
        AnalyzerSection {
            config_file: "slurm-config.ini".into(),
            work_root: "jobs".into(),
            poll_interval_ms: 2000,
            convert_extensions: vec![".zarr".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub token: String,
    #[serde(flatten)]
    pub principal: Principal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    pub bind_addr: String,
    pub tokens: Vec<TokenEntry>,
    /// Directory of built UI assets served under `/ui`, if any.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ApiSection {
    fn default() -> Self {
        ApiSection { bind_addr: "127.0.0.1:8080".into(), tokens: Vec::new(), ui_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub db: DbSection,
    pub repo: RepoSection,
    pub importer: ImporterSection,
    pub runner: RunnerSection,
    pub sim: crate::scheduler::SimConfig,
    pub analyzer: AnalyzerSection,
    pub api: ApiSection,
}

/// Parses an override value as a TOML literal, falling back to a plain string.
fn literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `FAIRFLOW_<SECTION>_<KEY>=value` pairs onto a parsed document.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    for (name, value) in env {
        if RESERVED_ENV.contains(&name.as_str()) {
            continue;
        }
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        let Some((section, key)) = rest.split_once('_') else {
            return Err(ConfigError::Invalid(format!("{name}: expected {ENV_PREFIX}<SECTION>_<KEY>")));
        };
        let (section, key) = (section.to_ascii_lowercase(), key.to_ascii_lowercase());
        let entry = table.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(section_table) = entry else {
            return Err(ConfigError::Invalid(format!("{section} is not a section")));
        };
        let parsed = match section_table.get(&key) {
            // Keep string settings strings even when the text looks numeric.
            Some(toml::Value::String(_)) => toml::Value::String(value),
            _ => literal(&value),
        };
        section_table.insert(key, parsed);
    }
    Ok(())
}

impl Config {
    /// Reads `path` (if given) and applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let (mut table, base) = match path {
            Some(path) => {
                let text =
                    fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
                let table: toml::Table = text.parse().map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, base)
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        // Defaults first so overrides see the type of the value they replace.
        let defaults = toml::Table::try_from(Config::default()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (section, values) in defaults {
            let (toml::Value::Table(values), Some(toml::Value::Table(existing))) =
                (values.clone(), table.get_mut(&section))
            else {
                table.entry(section).or_insert(values);
                continue;
            };
            for (k, v) in values {
                existing.entry(k).or_insert(v);
            }
        }
        apply_env_overrides(&mut table, env)?;
        let mut config: Config =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` with overrides from the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    /// Default layout rooted at `dir`.
    pub fn rooted_at(dir: &Path) -> Self {
        let mut config = Config::default();
        config.resolve_paths(dir);
        config
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && p.as_os_str() != ":memory:" {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.db.path);
        fix(&mut self.repo.managed_root);
        fix(&mut self.repo.remote_root);
        fix(&mut self.importer.local_workdir);
        fix(&mut self.analyzer.config_file);
        fix(&mut self.analyzer.work_root);
        if let Some(ui) = self.api.ui_dir.as_mut() {
            fix(ui);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.importer.workers == 0 {
            return Err(ConfigError::Invalid("importer.workers must be at least 1".into()));
        }
        if self.runner.timeout_secs == 0 {
            return Err(ConfigError::Invalid("runner.timeout_secs must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.api.tokens {
            if t.token.is_empty() || !seen.insert(t.token.as_str()) {
                return Err(ConfigError::Invalid("api.tokens must be non-empty and unique".into()));
            }
        }
        Ok(())
    }

    pub fn importer_poll_interval(&self) -> Duration {
        Duration::from_millis(self.importer.poll_interval_ms)
    }

    pub fn analyzer_poll_interval(&self) -> Duration {
        Duration::from_millis(self.analyzer.poll_interval_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_without_file() {
        let config = Config::load(None, env(&[])).unwrap();
        assert_eq!(config.importer.workers, 4);
        assert_eq!(config.importer.poll_interval_ms, 2000);
        assert_eq!(config.sim.queue_ticks, 1);
        assert_eq!(config.runner.backend, BackendKind::Mock);
    }

    #[test]
    fn file_values_and_env_overrides() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("fairflow.toml");
        fs::write(
            &path,
            "[importer]\nworkers = 2\n[repo]\nremote_root = \"/data\"\n[api]\ntokens = [{ token = \"t1\", username = \"luik\", group = \"Reits\", is_admin = true }]\n",
        )
        .unwrap();
        let config = Config::load(
            Some(&path),
            env(&[
                ("FAIRFLOW_IMPORTER_POLL_INTERVAL_MS", "50"), ("FAIRFLOW_API_BIND_ADDR", "0.0.0.0:9000"),
                ("FAIRFLOW_TOKEN", "t1"),
                ("OTHER", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(config.importer.workers, 2);
        assert_eq!(config.importer.poll_interval_ms, 50);
        assert_eq!(config.api.bind_addr, "0.0.0.0:9000");
        assert_eq!(config.repo.remote_root, PathBuf::from("/data"));
        assert_eq!(config.db.path, tmp.path().join("fairflow.db"));
        assert!(config.api.tokens[0].principal.is_admin);
    }

    #[test]
    fn zero_workers_is_fatal() {
        let err = Config::load(None, env(&[("FAIRFLOW_IMPORTER_WORKERS", "0")])).unwrap_err();
        assert_eq!(err.code(), "FATAL_CONFIG");
        let err = Config::load(None, env(&[("FAIRFLOW_IMPORTER_NOPE", "1")])).unwrap_err();
        assert_eq!(err.code(), "FATAL_CONFIG");
    }
}
