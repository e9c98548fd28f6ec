//! `fairflow` operator commands.
//!
//! Each subcommand is a `cmd_*` function over [`Services`] so that tests and
//! the binary share one code path with the HTTP API.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fairflow::analyzer::{InputSelection, OutputOptions};
use fairflow::config::ConfigError;
use fairflow::db::{DbError, RunProjection};
use fairflow::repo::ObjectKind;
use fairflow::seed::{SeedError, SeedReport};
use fairflow::services::{self, CheckResult, ServiceError};
use fairflow::{Config, ImportOrder, OrderRequest, Principal, RunRequest, Services};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "fairflow", version, about = "Import and analysis orchestration")]
pub struct Cli {
    /// TOML config file; `FAIRFLOW_<SECTION>_<KEY>` variables override it.
    #[arg(long, global = true, env = "FAIRFLOW_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print results as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// API token naming the acting user (from `api.tokens`).
    #[arg(long, global = true, env = "FAIRFLOW_TOKEN")]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the database, repository root and work directories.
    Init,
    /// Verify db, remote root, runner and scheduler; exit 1 on any FAIL.
    Check,
    /// Add the demo groups, mappings, remote files and containers.
    Seed,
    /// Queue an import order described by a JSON file.
    SubmitOrder { file: PathBuf },
    /// Start a workflow run and drive it to its end.
    RunWorkflow(RunArgs),
    /// Write the workflow event log as newline-delimited JSON.
    ExportEvents { out: PathBuf },
    /// Run the HTTP API together with the import daemon and analyzer.
    Serve,
    /// Run the import daemon and analyzer without HTTP.
    Daemon,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    pub name: String,
    /// Dataset holding the input images.
    #[arg(long)]
    pub dataset: u64,
    /// Input image ids; all images of the dataset when omitted.
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<u64>,
    /// `name=value`; the value is read as JSON when it parses, else as text.
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, Value)>,
    /// Dataset receiving the outputs; defaults to `--dataset`.
    #[arg(long)]
    pub target: Option<u64>,
    #[arg(long)]
    pub version: Option<String>,
}

fn parse_param(raw: &str) -> Result<(String, Value), String> {
    let (name, value) = raw.split_once('=').ok_or_else(|| format!("expected name=value, got {raw:?}"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((name.trim().to_string(), value))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.to_string(), message: message.into() }
    }
}

macro_rules! coded {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::new(err.code(), err.to_string())
            }
        }
    )*};
}

coded!(ConfigError, ServiceError, DbError, SeedError, fairflow::analyzer::AnalyzerError, fairflow::repo::RepoError);

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::new("IO_ERROR", err.to_string())
    }
}

/// What a command prints: a text rendering, a JSON value, and the exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub text: String,
    pub json: Value,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(text: impl Into<String>, json: Value) -> Self {
        Outcome { text: text.into(), json, exit_code: 0 }
    }
}

pub fn principal_for(config: &Config, token: Option<&str>) -> Result<Principal, CliError> {
    let token = token.ok_or_else(|| CliError::new("UNAUTHORIZED", "--token (or FAIRFLOW_TOKEN) is required"))?;
    config
        .api
        .tokens
        .iter()
        .find(|t| t.token == token)
        .map(|t| t.principal.clone())
        .ok_or_else(|| CliError::new("UNAUTHORIZED", "unknown token"))
}

pub fn cmd_init(config: &Config) -> Result<Vec<String>, CliError> {
    Ok(services::init(config)?)
}

pub fn cmd_check(config: &Config) -> Vec<CheckResult> {
    services::check(config)
}

pub fn cmd_seed(services: &Services) -> Result<SeedReport, CliError> {
    Ok(fairflow::seed::seed(services)?)
}

pub fn cmd_submit_order(services: &Services, file: &Path, principal: &Principal) -> Result<ImportOrder, CliError> {
    let text = fs::read_to_string(file).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", file.display())))?;
    let request: OrderRequest =
        serde_json::from_str(&text).map_err(|e| CliError::new("BAD_REQUEST", format!("{}: {e}", file.display())))?;
    Ok(services.submit_order(request, principal)?)
}

/// Starts the run and polls it in-process until it is DONE or FAILED.
pub fn cmd_run_workflow(services: &Services, args: &RunArgs, principal: &Principal) -> Result<RunProjection, CliError> {
    let image_ids = if args.images.is_empty() {
        services
            .repo
            .list_children(Some(args.dataset))?
            .into_iter()
            .filter(|o| o.kind == ObjectKind::Image)
            .map(|o| o.id)
            .collect()
    } else {
        args.images.clone()
    };
    let request = RunRequest {
        workflow_name: args.name.clone(),
        version: args.version.clone(),
        input_selection: InputSelection { container_id: args.dataset, image_ids },
        params: args.params.iter().cloned().collect(),
        output_options: OutputOptions {
            target_dataset_id: args.target.unwrap_or(args.dataset),
            attach_zip: false,
            attach_tables: false,
            email_on_done: false,
            rename_pattern: None,
        },
    };
    let run_uuid = services.analyzer.start_run(request, principal)?;
    Ok(services.analyzer.drive_to_completion(&run_uuid, 10_000)?)
}

pub fn cmd_export_events(services: &Services, out: &Path) -> Result<usize, CliError> {
    let file = fs::File::create(out).map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", out.display())))?;
    let mut writer = BufWriter::new(file);
    let n = services.db.export_events(&mut writer)?;
    std::io::Write::flush(&mut writer)?;
    Ok(n)
}

fn cmd_daemon(services: Services) -> Result<(), CliError> {
    let daemon = fairflow::importer::run_daemon(services.importer.clone())
        .map_err(|e| CliError::new("FATAL_CONFIG", e.to_string()))?;
    let ticker = fairflow::analyzer::Ticker::start(services.analyzer.clone());
    tracing::info!(workers = daemon.worker_count(), "daemon running; Ctrl-C stops");
    runtime()?.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    ticker.stop();
    daemon.shutdown();
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(CliError::from)
}

pub fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(Config::from_env(path)?)
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Init => {
            let created = cmd_init(&config)?;
            let text = if created.is_empty() {
                "already initialized".to_string()
            } else {
                created.iter().map(|c| format!("created {c}")).collect::<Vec<_>>().join("\n")
            };
            Ok(Outcome::ok(text, json!({ "created": created })))
        }
        Command::Check => {
            let results = cmd_check(&config);
            let pass = results.iter().all(|r| r.pass);
            let text = results.iter().map(CheckResult::line).collect::<Vec<_>>().join("\n");
            Ok(Outcome { text, json: json!(results), exit_code: if pass { 0 } else { 1 } })
        }
        Command::Seed => {
            let services = Services::open(&config)?;
            let report = cmd_seed(&services)?;
            let text = format!(
                "Reits: project {} dataset {}\nKrawczyk: project {} dataset {}\n{} remote files",
                report.reits_project,
                report.reits_dataset,
                report.krawczyk_project,
                report.krawczyk_dataset,
                report.files.len()
            );
            Ok(Outcome::ok(text, json!(report)))
        }
        Command::SubmitOrder { file } => {
            let principal = principal_for(&config, cli.token.as_deref())?;
            let services = Services::open(&config)?;
            let order = cmd_submit_order(&services, file, &principal)?;
            Ok(Outcome::ok(order.uuid.clone(), json!(order)))
        }
        Command::RunWorkflow(args) => {
            let principal = principal_for(&config, cli.token.as_deref())?;
            let services = Services::open(&config)?;
            let end = cmd_run_workflow(&services, args, &principal)?;
            let exit_code = if end.status == "DONE" { 0 } else { 1 };
            Ok(Outcome { text: end.run_uuid.clone(), json: json!(end), exit_code })
        }
        Command::ExportEvents { out } => {
            let services = Services::open(&config)?;
            let n = cmd_export_events(&services, out)?;
            Ok(Outcome::ok(format!("{n} events written to {}", out.display()), json!({ "events": n })))
        }
        Command::Serve => {
            let services = Services::open(&config)?;
            runtime()?.block_on(fairflow_api::serve(services)).map_err(|e| CliError::new(&e.code, e.message))?;
            Ok(Outcome::ok("stopped", Value::Null))
        }
        Command::Daemon => {
            cmd_daemon(Services::open(&config)?)?;
            Ok(Outcome::ok("stopped", Value::Null))
        }
    }
}
