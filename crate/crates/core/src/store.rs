//! Embedded transactional store shared by the provenance, repository and
//! forms modules. One SQLite connection behind a mutex: every operation runs
//! to completion before the next starts, which makes them linearizable.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use rusqlite::Connection;

use crate::time::{Clock, SystemClock, Timestamp};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("corrupt record: {0}")]
    Corrupt(String),
}

impl From<serde_json::Error> for StoreError {
    fn from(err: serde_json::Error) -> Self {
        StoreError::Corrupt(err.to_string())
    }
}

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS orders (
    uuid TEXT PRIMARY KEY,
    grp TEXT NOT NULL,
    username TEXT NOT NULL,
    destination_id INTEGER NOT NULL,
    destination_type TEXT NOT NULL,
    files TEXT NOT NULL,
    file_names TEXT NOT NULL,
    preprocessing TEXT,
    status TEXT NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    error_message TEXT
);
CREATE INDEX IF NOT EXISTS orders_by_status ON orders(status, created_at, uuid);
CREATE TABLE IF NOT EXISTS order_history (
    seq INTEGER PRIMARY KEY,
    uuid TEXT NOT NULL,
    status TEXT NOT NULL,
    at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS order_history_by_uuid ON order_history(uuid, seq);
CREATE TABLE IF NOT EXISTS group_mappings (
    grp TEXT PRIMARY KEY,
    subfolder TEXT NOT NULL UNIQUE
);
CREATE TABLE IF NOT EXISTS events (
    sequence INTEGER PRIMARY KEY,
    run_uuid TEXT NOT NULL,
    body TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS events_by_run ON events(run_uuid, sequence);
CREATE TABLE IF NOT EXISTS run_projections (
    run_uuid TEXT PRIMARY KEY,
    start_time TEXT NOT NULL,
    body TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS container_runs (
    id INTEGER PRIMARY KEY,
    order_uuid TEXT NOT NULL,
    container_ref TEXT NOT NULL,
    input TEXT NOT NULL,
    exit_code INTEGER NOT NULL,
    duration_ms INTEGER NOT NULL,
    at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS repo_objects (
    id INTEGER PRIMARY KEY,
    kind TEXT NOT NULL,
    name TEXT NOT NULL,
    owner TEXT NOT NULL,
    grp TEXT NOT NULL,
    parent_id INTEGER,
    acquired_at TEXT,
    imported_at TEXT
);
CREATE INDEX IF NOT EXISTS repo_objects_by_parent ON repo_objects(parent_id, id);
CREATE TABLE IF NOT EXISTS filesets (
    id INTEGER PRIMARY KEY,
    grp TEXT NOT NULL,
    transfer_mode TEXT NOT NULL,
    image_ids TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS fileset_entries (
    fileset_id INTEGER NOT NULL,
    pos INTEGER NOT NULL,
    link_path TEXT NOT NULL,
    target_path TEXT NOT NULL,
    PRIMARY KEY (fileset_id, pos)
);
CREATE TABLE IF NOT EXISTS kv_blocks (
    id INTEGER PRIMARY KEY,
    object_id INTEGER NOT NULL,
    namespace TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS kv_blocks_by_object ON kv_blocks(object_id, id);
CREATE TABLE IF NOT EXISTS kv_pairs (
    block_id INTEGER NOT NULL,
    pos INTEGER NOT NULL,
    key TEXT NOT NULL,
    value TEXT NOT NULL,
    PRIMARY KEY (block_id, pos)
);
CREATE INDEX IF NOT EXISTS kv_pairs_by_value ON kv_pairs(value);
CREATE TABLE IF NOT EXISTS file_attachments (
    id INTEGER PRIMARY KEY,
    object_id INTEGER NOT NULL,
    namespace TEXT NOT NULL,
    name TEXT NOT NULL,
    path TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS form_templates (
    form_id TEXT NOT NULL,
    version INTEGER NOT NULL,
    body TEXT NOT NULL,
    PRIMARY KEY (form_id, version)
);
CREATE TABLE IF NOT EXISTS form_submissions (
    seq INTEGER PRIMARY KEY,
    submission_id TEXT NOT NULL UNIQUE,
    form_id TEXT NOT NULL,
    object_id INTEGER NOT NULL,
    body TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS form_submissions_by_object ON form_submissions(object_id, form_id, seq);
"#;

/// Cloneable handle to the shared store.
#[derive(Clone)]
pub struct Database {
    conn: Arc<Mutex<Connection>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database").finish_non_exhaustive()
    }
}

impl Database {
    /// Opens (creating if needed) the store file. The path `:memory:` opens a
    /// private in-memory store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if path.as_os_str() == ":memory:" {
            return Self::open_in_memory();
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Database { conn: Arc::new(Mutex::new(conn)), clock: Arc::new(SystemClock) })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, Connection> {
        // A panicking holder leaves any open transaction to roll back on drop.
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Cheap liveness probe.
    pub fn ping(&self) -> Result<(), StoreError> {
        self.lock().query_row("SELECT 1", [], |_| Ok(()))?;
        Ok(())
    }
}
