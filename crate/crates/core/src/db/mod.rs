//! Provenance store: import orders, group-to-folder mappings, the append-only
//! workflow event log and its run projections.

mod events;
mod orders;

use std::io::{BufRead, Write};

use rusqlite::{params, OptionalExtension, Row, Transaction};
use uuid::Uuid;

pub use events::{
    replay, sort_runs, ContainerRunRecord, EventKind, NewEvent, RunFilter, RunProjection, WorkflowEvent,
    CREATED_STATUS, DEFAULT_RUN_NAME, DONE_STATUS, FAILED_STATUS,
};
pub use orders::{
    basename, is_under_subfolder, DestinationType, GroupMapping, ImportOrder, NewOrder, OrderFilter,
    OrderStatus,
};

use crate::runner::is_single_segment;
use crate::store::{Database, StoreError};
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("group {0:?} has no folder mapping")]
    UnmappedGroup(String),
    #[error("path {0:?} lies outside the group folder")]
    PathOutsideGroup(String),
    #[error("order has no files")]
    EmptyFileset,
    #[error("destination id must be positive")]
    InvalidDestination,
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: OrderStatus, to: OrderStatus },
    #[error("unknown order {0}")]
    UnknownOrder(String),
    #[error("FAILED status requires an error message")]
    FailedWithoutMessage,
    #[error("folder {subfolder:?} is already mapped to group {group:?}")]
    SubfolderTaken { subfolder: String, group: String },
    #[error("group {0:?} has no mapping")]
    UnknownGroup(String),
    #[error("folder {0:?} is not a single path segment")]
    InvalidSubfolder(String),
    #[error("run uuid {0:?} is not a UUID")]
    MalformedRunUuid(String),
    #[error("event import out of order: sequence {got} after {last}")]
    SequenceConflict { last: u64, got: u64 },
    #[error("malformed event record on line {line}: {reason}")]
    MalformedEvent { line: usize, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<rusqlite::Error> for DbError {
    fn from(err: rusqlite::Error) -> Self {
        DbError::Store(err.into())
    }
}

impl From<serde_json::Error> for DbError {
    fn from(err: serde_json::Error) -> Self {
        DbError::Store(err.into())
    }
}

impl DbError {
    pub fn code(&self) -> &'static str {
        match self {
            DbError::UnmappedGroup(_) => "UNMAPPED_GROUP",
            DbError::PathOutsideGroup(_) => "PATH_OUTSIDE_GROUP",
            DbError::EmptyFileset => "EMPTY_FILESET",
            DbError::InvalidDestination => "INVALID_DESTINATION",
            DbError::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
            DbError::UnknownOrder(_) => "UNKNOWN_ORDER",
            DbError::FailedWithoutMessage => "FAILED_WITHOUT_MESSAGE",
            DbError::SubfolderTaken { .. } => "SUBFOLDER_TAKEN",
            DbError::UnknownGroup(_) => "UNKNOWN_GROUP",
            DbError::InvalidSubfolder(_) => "INVALID_SUBFOLDER",
            DbError::MalformedRunUuid(_) => "MALFORMED_RUN_UUID",
            DbError::SequenceConflict { .. } => "SEQUENCE_CONFLICT",
            DbError::MalformedEvent { .. } => "MALFORMED_EVENT",
            DbError::Store(_) | DbError::Io(_) => "STORE_ERROR",
        }
    }
}

type Result<T, E = DbError> = std::result::Result<T, E>;

fn parse_col<T: std::str::FromStr>(row: &Row<'_>, idx: usize) -> rusqlite::Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let raw: String = row.get(idx)?;
    raw.parse().map_err(|e| rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e)))
}

fn json_col<T: serde::de::DeserializeOwned>(row: &Row<'_>, idx: usize) -> rusqlite::Result<T> {
    let raw: String = row.get(idx)?;
    serde_json::from_str(&raw)
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e)))
}

const ORDER_COLUMNS: &str = "uuid, grp, username, destination_id, destination_type, files, file_names, \
     preprocessing, status, created_at, updated_at, error_message";

fn order_from_row(row: &Row<'_>) -> rusqlite::Result<ImportOrder> {
    let preprocessing: Option<String> = row.get(7)?;
    let preprocessing = preprocessing
        .map(|raw| serde_json::from_str(&raw))
        .transpose()
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(7, rusqlite::types::Type::Text, Box::new(e)))?;
    Ok(ImportOrder {
        uuid: row.get(0)?,
        group: row.get(1)?,
        username: row.get(2)?,
        destination_id: row.get::<_, i64>(3)? as u64,
        destination_type: parse_col(row, 4)?,
        files: json_col(row, 5)?,
        file_names: json_col(row, 6)?,
        preprocessing,
        status: parse_col(row, 8)?,
        created_at: parse_col(row, 9)?,
        updated_at: parse_col(row, 10)?,
        error_message: row.get(11)?,
    })
}

fn record_history(tx: &Transaction<'_>, uuid: &str, status: OrderStatus, at: Timestamp) -> rusqlite::Result<()> {
    tx.execute(
        "INSERT INTO order_history (uuid, status, at) VALUES (?1, ?2, ?3)",
        params![uuid, status.as_str(), at.to_string()],
    )?;
    Ok(())
}

/// Handle over the provenance tables of a [`Database`].
#[derive(Debug, Clone)]
pub struct ProvenanceDb {
    db: Database,
}

impl ProvenanceDb {
    pub fn new(db: Database) -> Self {
        ProvenanceDb { db }
    }

    pub fn database(&self) -> &Database {
        &self.db
    }

    // ---- orders ---------------------------------------------------------

    pub fn create_order(&self, request: NewOrder) -> Result<ImportOrder> {
        if request.files.is_empty() {
            return Err(DbError::EmptyFileset);
        }
        if request.destination_id == 0 || request.destination_id > i64::MAX as u64 {
            return Err(DbError::InvalidDestination);
        }
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let subfolder: Option<String> = tx
            .query_row("SELECT subfolder FROM group_mappings WHERE grp = ?1", [&request.group], |r| r.get(0))
            .optional()?;
        let subfolder = subfolder.ok_or_else(|| DbError::UnmappedGroup(request.group.clone()))?;
        if let Some(bad) = request.files.iter().find(|f| !is_under_subfolder(f, &subfolder)) {
            return Err(DbError::PathOutsideGroup(bad.clone()));
        }

        let now = self.db.now();
        let order = ImportOrder {
            uuid: Uuid::new_v4().to_string(),
            file_names: request.files.iter().map(|f| basename(f)).collect(),
            group: request.group,
            username: request.username,
            destination_id: request.destination_id,
            destination_type: request.destination_type,
            files: request.files,
            preprocessing: request.preprocessing,
            status: OrderStatus::Pending,
            created_at: now,
            updated_at: now,
            error_message: None,
        };
        tx.execute(
            &format!("INSERT INTO orders ({ORDER_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)"),
            params![
                order.uuid,
                order.group,
                order.username,
                order.destination_id as i64,
                order.destination_type.as_str(),
                serde_json::to_string(&order.files)?,
                serde_json::to_string(&order.file_names)?,
                order.preprocessing.as_ref().map(serde_json::to_string).transpose()?,
                order.status.as_str(),
                order.created_at.to_string(),
                order.updated_at.to_string(),
                order.error_message,
            ],
        )?;
        record_history(&tx, &order.uuid, order.status, now)?;
        tx.commit()?;
        Ok(order)
    }

    pub fn get_order(&self, uuid: &str) -> Result<ImportOrder> {
        let conn = self.db.lock();
        conn.query_row(&format!("SELECT {ORDER_COLUMNS} FROM orders WHERE uuid = ?1"), [uuid], order_from_row)
            .optional()?
            .ok_or_else(|| DbError::UnknownOrder(uuid.to_string()))
    }

    /// Moves the oldest pending order to STARTED and hands it to the caller.
    /// Each order is handed out at most once.
    pub fn claim_next_pending(&self, worker_id: &str) -> Result<Option<ImportOrder>> {
        let mut conn = self.db.lock();
        // IMMEDIATE takes the write lock up front so claimers in other processes wait instead of racing.
        let tx = conn.transaction_with_behavior(rusqlite::TransactionBehavior::Immediate)?;
        let candidate: Option<String> = tx
            .query_row(
                "SELECT uuid FROM orders WHERE status = 'PENDING' ORDER BY created_at, uuid LIMIT 1",
                [],
                |r| r.get(0),
            )
            .optional()?;
        let Some(uuid) = candidate else {
            return Ok(None);
        };
        let now = self.db.now();
        let changed = tx.execute(
            "UPDATE orders SET status = 'STARTED', updated_at = ?2 WHERE uuid = ?1 AND status = 'PENDING'",
            params![uuid, now.to_string()],
        )?;
        if changed != 1 {
            return Ok(None);
        }
        record_history(&tx, &uuid, OrderStatus::Started, now)?;
        let order = tx.query_row(&format!("SELECT {ORDER_COLUMNS} FROM orders WHERE uuid = ?1"), [&uuid], order_from_row)?;
        tx.commit()?;
        tracing::debug!(order = %uuid, worker = worker_id, "claimed");
        Ok(Some(order))
    }

    pub fn update_order_status(&self, uuid: &str, new_status: OrderStatus, error_message: Option<&str>) -> Result<()> {
        let message = match new_status {
            OrderStatus::Failed => match error_message.map(str::trim).filter(|m| !m.is_empty()) {
                Some(_) => error_message,
                None => return Err(DbError::FailedWithoutMessage),
            },
            _ => None,
        };
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let current: Option<OrderStatus> = tx
            .query_row("SELECT status FROM orders WHERE uuid = ?1", [uuid], |r| parse_col(r, 0))
            .optional()?;
        let current = current.ok_or_else(|| DbError::UnknownOrder(uuid.to_string()))?;
        if !current.can_transition_to(new_status) {
            return Err(DbError::IllegalTransition { from: current, to: new_status });
        }
        let now = self.db.now();
        let changed = tx.execute(
            "UPDATE orders SET status = ?2, updated_at = ?3, error_message = ?4 WHERE uuid = ?1 AND status = ?5",
            params![uuid, new_status.as_str(), now.to_string(), message, current.as_str()],
        )?;
        if changed != 1 {
            return Err(DbError::IllegalTransition { from: current, to: new_status });
        }
        record_history(&tx, uuid, new_status, now)?;
        tx.commit()?;
        Ok(())
    }

    /// Orders matching every supplied filter field, newest first.
    pub fn list_orders(&self, filter: &OrderFilter) -> Result<Vec<ImportOrder>> {
        let mut sql = format!("SELECT {ORDER_COLUMNS} FROM orders WHERE 1 = 1");
        let mut args: Vec<String> = Vec::new();
        if let Some(status) = filter.status {
            args.push(status.as_str().to_string());
            sql.push_str(&format!(" AND status = ?{}", args.len()));
        }
        if let Some(group) = &filter.group {
            args.push(group.clone());
            sql.push_str(&format!(" AND grp = ?{}", args.len()));
        }
        if let Some(range) = &filter.date_range {
            args.push(range.from.to_string());
            sql.push_str(&format!(" AND created_at >= ?{}", args.len()));
            args.push(range.to.to_string());
            sql.push_str(&format!(" AND created_at < ?{}", args.len()));
        }
        sql.push_str(" ORDER BY created_at DESC, uuid DESC");
        let conn = self.db.lock();
        let mut stmt = conn.prepare(&sql)?;
        let rows = stmt.query_map(rusqlite::params_from_iter(args.iter()), order_from_row)?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }

    /// Every status an order has held, oldest first.
    pub fn order_history(&self, uuid: &str) -> Result<Vec<(OrderStatus, Timestamp)>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare("SELECT status, at FROM order_history WHERE uuid = ?1 ORDER BY seq")?;
        let rows = stmt.query_map([uuid], |r| Ok((parse_col(r, 0)?, parse_col(r, 1)?)))?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }

    // ---- group mappings -------------------------------------------------

    pub fn upsert_mapping(&self, group: &str, subfolder: &str) -> Result<Vec<GroupMapping>> {
        if !is_single_segment(subfolder) {
            return Err(DbError::InvalidSubfolder(subfolder.to_string()));
        }
        {
            let mut conn = self.db.lock();
            let tx = conn.transaction()?;
            let holder: Option<String> = tx
                .query_row("SELECT grp FROM group_mappings WHERE subfolder = ?1", [subfolder], |r| r.get(0))
                .optional()?;
            match holder {
                Some(existing) if existing != group => {
                    return Err(DbError::SubfolderTaken { subfolder: subfolder.to_string(), group: existing })
                }
                _ => {}
            }
            tx.execute(
                "INSERT INTO group_mappings (grp, subfolder) VALUES (?1, ?2) \
                 ON CONFLICT(grp) DO UPDATE SET subfolder = excluded.subfolder",
                params![group, subfolder],
            )?;
            tx.commit()?;
        }
        self.list_mappings()
    }

    pub fn delete_mapping(&self, group: &str) -> Result<Vec<GroupMapping>> {
        let removed = self.db.lock().execute("DELETE FROM group_mappings WHERE grp = ?1", [group])?;
        if removed == 0 {
            return Err(DbError::UnknownGroup(group.to_string()));
        }
        self.list_mappings()
    }

    pub fn list_mappings(&self) -> Result<Vec<GroupMapping>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare("SELECT grp, subfolder FROM group_mappings ORDER BY grp")?;
        let rows = stmt.query_map([], |r| Ok(GroupMapping { group: r.get(0)?, subfolder: r.get(1)? }))?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }

    pub fn mapping_for(&self, group: &str) -> Result<Option<String>> {
        Ok(self
            .db
            .lock()
            .query_row("SELECT subfolder FROM group_mappings WHERE grp = ?1", [group], |r| r.get(0))
            .optional()?)
    }

    // ---- event log ------------------------------------------------------

    /// Appends an event and returns its global sequence number.
    pub fn append_event(&self, event: NewEvent) -> Result<u64> {
        if Uuid::parse_str(&event.run_uuid).is_err() {
            return Err(DbError::MalformedRunUuid(event.run_uuid));
        }
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let last: u64 = tx.query_row("SELECT COALESCE(MAX(sequence), 0) FROM events", [], |r| r.get::<_, i64>(0))? as u64;
        let stored = WorkflowEvent {
            sequence: last + 1,
            run_uuid: event.run_uuid,
            user_id: event.user_id,
            group_id: event.group_id,
            task_name: event.task_name,
            event_kind: event.event_kind,
            payload: event.payload,
            timestamp: self.db.now(),
        };
        insert_event(&tx, &stored)?;
        tx.commit()?;
        Ok(stored.sequence)
    }

    /// Exact stored bytes of one event.
    pub fn event_record(&self, sequence: u64) -> Result<Option<String>> {
        Ok(self
            .db
            .lock()
            .query_row("SELECT body FROM events WHERE sequence = ?1", [sequence as i64], |r| r.get(0))
            .optional()?)
    }

    pub fn events(&self) -> Result<Vec<WorkflowEvent>> {
        self.query_events("SELECT body FROM events ORDER BY sequence", [])
    }

    pub fn events_for_run(&self, run_uuid: &str) -> Result<Vec<WorkflowEvent>> {
        self.query_events("SELECT body FROM events WHERE run_uuid = ?1 ORDER BY sequence", [run_uuid])
    }

    fn query_events<P: rusqlite::Params>(&self, sql: &str, args: P) -> Result<Vec<WorkflowEvent>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare(sql)?;
        let rows = stmt.query_map(args, |r| json_col(r, 0))?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }

    /// Incrementally maintained projections matching `filter`, newest first.
    pub fn project_runs(&self, filter: &RunFilter) -> Result<Vec<RunProjection>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare("SELECT body FROM run_projections")?;
        let rows = stmt.query_map([], |r| json_col::<RunProjection>(r, 0))?;
        let mut runs = Vec::new();
        for run in rows {
            let run = run?;
            if filter.matches(&run) {
                runs.push(run);
            }
        }
        sort_runs(&mut runs);
        Ok(runs)
    }

    pub fn run_projection(&self, run_uuid: &str) -> Result<Option<RunProjection>> {
        let conn = self.db.lock();
        let body: Option<String> = conn
            .query_row("SELECT body FROM run_projections WHERE run_uuid = ?1", [run_uuid], |r| r.get(0))
            .optional()?;
        Ok(body.map(|b| serde_json::from_str(&b)).transpose()?)
    }

    /// Projections recomputed from scratch by folding the full log.
    pub fn replay_runs(&self, filter: &RunFilter) -> Result<Vec<RunProjection>> {
        let events = self.events()?;
        let mut runs: Vec<_> = replay(&events).into_values().filter(|r| filter.matches(r)).collect();
        sort_runs(&mut runs);
        Ok(runs)
    }

    /// Writes the log as newline-delimited JSON, one event per line.
    pub fn export_events(&self, out: &mut impl Write) -> Result<usize> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare("SELECT body FROM events ORDER BY sequence")?;
        let mut rows = stmt.query([])?;
        let mut count = 0;
        while let Some(row) = rows.next()? {
            let body: String = row.get(0)?;
            out.write_all(body.as_bytes())?;
            out.write_all(b"\n")?;
            count += 1;
        }
        Ok(count)
    }

    /// Loads an exported log. Sequences must continue past the current log.
    pub fn import_events(&self, input: impl BufRead) -> Result<usize> {
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let mut last: u64 = tx.query_row("SELECT COALESCE(MAX(sequence), 0) FROM events", [], |r| r.get::<_, i64>(0))? as u64;
        let mut count = 0;
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: WorkflowEvent = serde_json::from_str(&line)
                .map_err(|e| DbError::MalformedEvent { line: idx + 1, reason: e.to_string() })?;
            if event.sequence <= last {
                return Err(DbError::SequenceConflict { last, got: event.sequence });
            }
            if Uuid::parse_str(&event.run_uuid).is_err() {
                return Err(DbError::MalformedRunUuid(event.run_uuid));
            }
            last = event.sequence;
            insert_event(&tx, &event)?;
            count += 1;
        }
        tx.commit()?;
        Ok(count)
    }

    // ---- container journal ---------------------------------------------

    pub fn record_container_run(&self, record: &ContainerRunRecord) -> Result<()> {
        self.db.lock().execute(
            "INSERT INTO container_runs (order_uuid, container_ref, input, exit_code, duration_ms, at) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                record.order_uuid,
                record.container_ref,
                record.input,
                record.exit_code,
                record.duration_ms as i64,
                record.at.to_string()
            ],
        )?;
        Ok(())
    }

    pub fn container_runs(&self, order_uuid: &str) -> Result<Vec<ContainerRunRecord>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare(
            "SELECT order_uuid, container_ref, input, exit_code, duration_ms, at FROM container_runs \
             WHERE order_uuid = ?1 ORDER BY id",
        )?;
        let rows = stmt.query_map([order_uuid], |r| {
            Ok(ContainerRunRecord {
                order_uuid: r.get(0)?,
                container_ref: r.get(1)?,
                input: r.get(2)?,
                exit_code: r.get(3)?,
                duration_ms: r.get::<_, i64>(4)? as u64,
                at: parse_col(r, 5)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }
}

/// Stores the event and folds it into the persisted projection.
fn insert_event(tx: &Transaction<'_>, event: &WorkflowEvent) -> Result<()> {
    tx.execute(
        "INSERT INTO events (sequence, run_uuid, body) VALUES (?1, ?2, ?3)",
        params![event.sequence as i64, event.run_uuid, serde_json::to_string(event)?],
    )?;
    let existing: Option<String> = tx
        .query_row("SELECT body FROM run_projections WHERE run_uuid = ?1", [&event.run_uuid], |r| r.get(0))
        .optional()?;
    let mut projection = match existing {
        Some(body) => serde_json::from_str(&body)?,
        None => RunProjection::seed(event),
    };
    projection.apply(event);
    tx.execute(
        "INSERT INTO run_projections (run_uuid, start_time, body) VALUES (?1, ?2, ?3) \
         ON CONFLICT(run_uuid) DO UPDATE SET start_time = excluded.start_time, body = excluded.body",
        params![projection.run_uuid, projection.start_time.to_string(), serde_json::to_string(&projection)?],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ProvenanceDb {
        let db = ProvenanceDb::new(Database::open_in_memory().unwrap());
        db.upsert_mapping("Reits", "coreReits").unwrap();
        db.upsert_mapping("Krawczyk", "coreKrawczyk").unwrap();
        db
    }

    fn czi_order() -> NewOrder {
        NewOrder {
            group: "Reits".into(),
            username: "luik".into(),
            destination_id: 1755,
            destination_type: DestinationType::Dataset,
            files: vec![
                "coreReits/.../18-CRO-20 Heufl spinal cord.czi".into(),
                "coreReits/.../18-20xPNeo-with-TIE_DIC_01.czi".into(),
            ],
            preprocessing: None,
        }
    }

    #[test]
    fn create_order_is_pending_with_basenames() {
        let db = store();
        let order = db.create_order(czi_order()).unwrap();
        assert_eq!(order.status, OrderStatus::Pending);
        assert_eq!(order.file_names, ["18-CRO-20 Heufl spinal cord.czi", "18-20xPNeo-with-TIE_DIC_01.czi"]);
        assert!(Uuid::parse_str(&order.uuid).is_ok());
        assert_eq!(db.get_order(&order.uuid).unwrap(), order);
    }

    #[test]
    fn create_order_errors() {
        let db = store();
        let mut empty = czi_order();
        empty.files.clear();
        assert_eq!(db.create_order(empty).unwrap_err().code(), "EMPTY_FILESET");

        let mut outside = czi_order();
        outside.group = "Krawczyk".into();
        outside.files = vec!["coreReits/x.tif".into()];
        assert_eq!(db.create_order(outside).unwrap_err().code(), "PATH_OUTSIDE_GROUP");

        let mut unmapped = czi_order();
        unmapped.group = "Nobody".into();
        assert_eq!(db.create_order(unmapped).unwrap_err().code(), "UNMAPPED_GROUP");
    }

    #[test]
    fn claim_on_empty_store() {
        assert!(store().claim_next_pending("w").unwrap().is_none());
    }

    #[test]
    fn claim_moves_to_started_once() {
        let db = store();
        let order = db.create_order(czi_order()).unwrap();
        let claimed = db.claim_next_pending("w1").unwrap().unwrap();
        assert_eq!(claimed.uuid, order.uuid);
        assert_eq!(claimed.status, OrderStatus::Started);
        assert!(db.claim_next_pending("w2").unwrap().is_none());
    }

    #[test]
    fn claim_is_fifo() {
        let db = store();
        let first = db.create_order(czi_order()).unwrap();
        let second = db.create_order(czi_order()).unwrap();
        assert_eq!(db.claim_next_pending("w").unwrap().unwrap().uuid, first.uuid);
        assert_eq!(db.claim_next_pending("w").unwrap().unwrap().uuid, second.uuid);
    }

    #[test]
    fn status_updates_follow_graph() {
        let db = store();
        let order = db.create_order(czi_order()).unwrap();
        let err = db.update_order_status(&order.uuid, OrderStatus::Completed, None).unwrap_err();
        assert_eq!(err.code(), "ILLEGAL_TRANSITION");
        db.claim_next_pending("w").unwrap();
        db.update_order_status(&order.uuid, OrderStatus::Preprocessing, None).unwrap();
        db.update_order_status(&order.uuid, OrderStatus::Completed, None).unwrap();
        let err = db.update_order_status(&order.uuid, OrderStatus::Pending, None).unwrap_err();
        assert_eq!(err.code(), "ILLEGAL_TRANSITION");
        let statuses: Vec<_> = db.order_history(&order.uuid).unwrap().into_iter().map(|(s, _)| s).collect();
        assert_eq!(
            statuses,
            [OrderStatus::Pending, OrderStatus::Started, OrderStatus::Preprocessing, OrderStatus::Completed]
        );
    }

    #[test]
    fn failed_requires_message() {
        let db = store();
        let order = db.create_order(czi_order()).unwrap();
        db.claim_next_pending("w").unwrap();
        assert_eq!(
            db.update_order_status(&order.uuid, OrderStatus::Failed, Some("  ")).unwrap_err().code(),
            "FAILED_WITHOUT_MESSAGE"
        );
        db.update_order_status(&order.uuid, OrderStatus::Failed, Some("import: TARGET_MISSING")).unwrap();
        let failed = db.get_order(&order.uuid).unwrap();
        assert_eq!(failed.error_message.as_deref(), Some("import: TARGET_MISSING"));
        assert_eq!(
            db.update_order_status("nope", OrderStatus::Started, None).unwrap_err().code(),
            "UNKNOWN_ORDER"
        );
    }

    #[test]
    fn mappings_stay_bijective() {
        let db = store();
        assert_eq!(db.list_mappings().unwrap().len(), 2);
        assert_eq!(db.upsert_mapping("Other", "coreReits").unwrap_err().code(), "SUBFOLDER_TAKEN");
        assert_eq!(db.upsert_mapping("Other", "a/b").unwrap_err().code(), "INVALID_SUBFOLDER");
        let left = db.delete_mapping("Reits").unwrap();
        assert_eq!(left, vec![GroupMapping { group: "Krawczyk".into(), subfolder: "coreKrawczyk".into() }]);
        assert_eq!(db.delete_mapping("Reits").unwrap_err().code(), "UNKNOWN_GROUP");
        // re-binding the same group moves its folder
        db.upsert_mapping("Krawczyk", "coreK2").unwrap();
        assert_eq!(db.mapping_for("Krawczyk").unwrap().as_deref(), Some("coreK2"));
    }

    #[test]
    fn first_event_gets_sequence_one() {
        let db = store();
        let seq = db
            .append_event(NewEvent::new("c4bd405b-2da8-4ceb-9103-16d91e8bdea6", EventKind::RunCreated, "cellpose"))
            .unwrap();
        assert_eq!(seq, 1);
        let err = db.append_event(NewEvent::new("not-a-uuid", EventKind::RunCreated, "x")).unwrap_err();
        assert_eq!(err.code(), "MALFORMED_RUN_UUID");
    }

    #[test]
    fn incremental_projection_matches_replay() {
        let db = store();
        let run = "c4bd405b-2da8-4ceb-9103-16d91e8bdea6";
        db.append_event(NewEvent::new(run, EventKind::RunCreated, "cellpose").by(402, 53)).unwrap();
        db.append_event(NewEvent::new(run, EventKind::JobSubmitted, "cellpose").with("job_id", "1")).unwrap();
        db.append_event(
            NewEvent::new(run, EventKind::StatusUpdate, "cellpose").with("status", "JOB_PENDING").with("progress", "50"),
        )
        .unwrap();
        let live = db.project_runs(&RunFilter::default()).unwrap();
        assert_eq!(live, db.replay_runs(&RunFilter::default()).unwrap());
        assert_eq!(live[0].status, "JOB_PENDING");
        assert_eq!(live[0].progress, 50.0);
        let filtered = db.project_runs(&RunFilter { group_id: Some(99), ..Default::default() }).unwrap();
        assert!(filtered.is_empty());
    }

    #[test]
    fn export_of_empty_log_is_empty() {
        let mut out = Vec::new();
        assert_eq!(store().export_events(&mut out).unwrap(), 0);
        assert!(out.is_empty());
    }

    #[test]
    fn import_rejects_rewinding_sequences() {
        let db = store();
        let run = "c4bd405b-2da8-4ceb-9103-16d91e8bdea6";
        db.append_event(NewEvent::new(run, EventKind::RunCreated, "cellpose")).unwrap();
        let mut out = Vec::new();
        db.export_events(&mut out).unwrap();
        let err = db.import_events(out.as_slice()).unwrap_err();
        assert_eq!(err.code(), "SEQUENCE_CONFLICT");
    }
}
