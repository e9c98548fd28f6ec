//! Demo tenants, remote files and repository containers.
//!
//! Two groups, Reits and Krawczyk, each mapped to a remote folder and owning
//! one Project/Dataset pair. Seeding again reuses what is already there.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{Config, TokenEntry};
use crate::principal::Principal;
use crate::repo::{NewObject, ObjectKind, RepoError};
use crate::services::Services;

pub const ADMIN_TOKEN: &str = "admin-token";
pub const REITS_TOKEN: &str = "reits-token";
pub const KRAWCZYK_TOKEN: &str = "krawczyk-token";

/// Two microscope files as queued from the Import screen.
pub const REITS_FILES: [&str; 2] =
    ["coreReits/imports/18-CRO-20 Heufl spinal cord.czi", "coreReits/imports/18-20xPNeo-with-TIE_DIC_01.czi"];
pub const KRAWCZYK_FILES: [&str; 1] = ["coreKrawczyk/plates/well_A01.tif"];

pub fn admin() -> Principal {
    Principal::new("root", "system").with_ids(0, 0).admin()
}

pub fn reits_user() -> Principal {
    let mut p = Principal::new("luik", "Reits").with_ids(52, 53);
    p.display_name = Some("Rodrigo Rosas-Bertolini".into());
    p
}

pub fn krawczyk_user() -> Principal {
    Principal::new("kraw", "Krawczyk").with_ids(60, 61)
}

/// Token table for the three demo principals.
pub fn demo_tokens() -> Vec<TokenEntry> {
    [(ADMIN_TOKEN, admin()), (REITS_TOKEN, reits_user()), (KRAWCZYK_TOKEN, krawczyk_user())]
        .into_iter()
        .map(|(token, principal)| TokenEntry { token: token.into(), principal })
        .collect()
}

/// Default layout under `dir` with the demo tokens and fast polling.
pub fn demo_config(dir: &Path) -> Config {
    let mut config = Config::rooted_at(dir);
    config.api.tokens = demo_tokens();
    config.importer.poll_interval_ms = 20;
    config.analyzer.poll_interval_ms = 20;
    config
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeedReport {
    pub reits_project: u64,
    pub reits_dataset: u64,
    pub krawczyk_project: u64,
    pub krawczyk_dataset: u64,
    pub files: Vec<String>,
}

fn container(services: &Services, owner: &Principal, project: &str, dataset: &str) -> Result<(u64, u64), RepoError> {
    let repo = &services.repo;
    let existing = repo
        .list_children(None)?
        .into_iter()
        .find(|o| o.kind == ObjectKind::Project && o.name == project && o.group == owner.group);
    let project = match existing {
        Some(p) => p,
        None => repo.create_object(NewObject::new(ObjectKind::Project, project, &owner.username, &owner.group))?,
    };
    let existing = repo.list_children(Some(project.id))?.into_iter().find(|o| o.name == dataset);
    let dataset = match existing {
        Some(d) => d,
        None => repo.create_object(
            NewObject::new(ObjectKind::Dataset, dataset, &owner.username, &owner.group).under(project.id),
        )?,
    };
    Ok((project.id, dataset.id))
}

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error(transparent)]
    Db(#[from] crate::db::DbError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SeedError {
    pub fn code(&self) -> &'static str {
        match self {
            SeedError::Db(e) => e.code(),
            SeedError::Repo(e) => e.code(),
            SeedError::Io(_) => "IO_ERROR",
        }
    }
}

pub fn seed(services: &Services) -> Result<SeedReport, SeedError> {
    let db = &services.db;
    db.upsert_mapping("Reits", "coreReits")?;
    db.upsert_mapping("Krawczyk", "coreKrawczyk")?;
    let remote = &services.config.repo.remote_root;
    let mut files = Vec::new();
    for (i, rel) in REITS_FILES.iter().chain(KRAWCZYK_FILES.iter()).enumerate() {
        let path = remote.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !path.exists() {
            fs::write(&path, format!("demo image {i}\n"))?;
        }
        files.push(rel.to_string());
    }
    let (reits_project, reits_dataset) = container(services, &reits_user(), "Spinal cord", "CZI imports")?;
    let (krawczyk_project, krawczyk_dataset) = container(services, &krawczyk_user(), "Screening", "Plates")?;
    Ok(SeedReport { reits_project, reits_dataset, krawczyk_project, krawczyk_dataset, files })
}

pub const BIOSAMPLE_FORM: &str = "REMBI_Biosample";

/// Biosample metadata form: module header plus organism attributes.
pub fn biosample_schema() -> serde_json::Value {
    serde_json::json!({
        "template_info": {"type": "object", "fields": {"ModuleName": {"type": "string", "required": true}}},
        "attribute_list": {"type": "object", "fields": {
            "Organism": {"type": "string", "required": true, "term_accession": "NCBITaxon"},
            "Organism_TermAccession": {"type": "string"},
            "Variables": {"type": "string"}
        }}
    })
}

pub fn biosample_values() -> serde_json::Value {
    serde_json::json!({
        "template_info": {"ModuleName": "REMBI_Biosample"},
        "attribute_list": {
            "Organism": "Homo sapiens",
            "Organism_TermAccession": "https://www.ncbi.nlm.nih.gov/Taxonomy/Browser/wwwtax.cgi?id=9606"
        }
    })
}
