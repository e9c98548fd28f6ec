//! Provenance-first data ingestion and analysis orchestration.

pub mod analyzer;
pub mod config;
pub mod db;
pub mod forms;
pub mod importer;
pub mod principal;
pub mod repo;
pub mod runner;
pub mod scheduler;
pub mod seed;
pub mod services;
pub mod store;
pub mod time;

pub use analyzer::{Analyzer, RunRequest, WorkflowDefinition, WorkflowRegistry};
pub use config::Config;
pub use db::{DestinationType, ImportOrder, OrderStatus, ProvenanceDb};
pub use forms::FormsRegistry;
pub use importer::Importer;
pub use principal::Principal;
pub use repo::ImageRepo;
pub use scheduler::SchedulerSim;
pub use services::{OrderRequest, Services};
pub use store::Database;
pub use time::Timestamp;
