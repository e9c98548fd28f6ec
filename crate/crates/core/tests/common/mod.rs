#![allow(dead_code)]

use std::sync::Arc;

use fairflow::seed::{self, SeedReport};
use fairflow::services::{self, OrderRequest};
use fairflow::time::{ManualClock, Timestamp};
use fairflow::{DestinationType, Services};
use tempfile::TempDir;

pub struct Stack {
    pub dir: TempDir,
    pub services: Services,
    pub seeded: SeedReport,
}

pub fn start() -> Timestamp {
    "2025-10-13T14:37:40.068805".parse().unwrap()
}

/// Fresh on-disk stack with demo tenants and a stepping clock.
pub fn stack() -> Stack {
    let dir = tempfile::tempdir().unwrap();
    let config = seed::demo_config(dir.path());
    services::init(&config).unwrap();
    let services = Services::open_with_clock(&config, Arc::new(ManualClock::new(start(), 1_000))).unwrap();
    let seeded = seed::seed(&services).unwrap();
    Stack { dir, services, seeded }
}

impl Stack {
    pub fn reits_order(&self) -> OrderRequest {
        OrderRequest {
            destination_id: self.seeded.reits_dataset,
            destination_type: DestinationType::Dataset,
            files: seed::REITS_FILES.iter().map(|s| s.to_string()).collect(),
            preprocessing: None,
        }
    }
}

impl Stack {
    /// Imports `files` into the Reits dataset and returns the new image ids.
    pub fn import_files(&self, files: &[&str]) -> Vec<u64> {
        let mut request = self.reits_order();
        request.files = files.iter().map(|s| s.to_string()).collect();
        for f in files {
            let path = self.services.config.repo.remote_root.join(f);
            if !path.exists() {
                std::fs::write(&path, b"pixels").unwrap();
            }
        }
        let order = self.services.submit_order(request, &seed::reits_user()).unwrap();
        self.services.importer.drain("w").unwrap();
        assert_eq!(self.services.db.get_order(&order.uuid).unwrap().status, fairflow::OrderStatus::Completed);
        let fileset = self.services.repo.list_filesets().unwrap().pop().unwrap();
        fileset.image_ids
    }
}
