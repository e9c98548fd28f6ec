//! Simulated image repository: containers, images grouped in filesets, and
//! namespaced key-value annotations with value search.
//!
//! Fileset entries live on disk under
//! `<managed_root>/<group>/<fileset-id>/<basename>`: a real symbolic link to
//! the original file for in-place imports, a byte copy otherwise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rusqlite::{params, OptionalExtension, Row, Transaction};
use serde::{Deserialize, Serialize};

use crate::store::{Database, StoreError};
use crate::time::Timestamp;

pub const TRANSFER_NAMESPACE: &str = "omero.import";
pub const IN_PLACE_TRANSFER: &str = "ln_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectKind {
    Project,
    Dataset,
    Screen,
    Plate,
    Image,
}

impl ObjectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Project => "Project",
            ObjectKind::Dataset => "Dataset",
            ObjectKind::Screen => "Screen",
            ObjectKind::Plate => "Plate",
            ObjectKind::Image => "Image",
        }
    }

    /// Whether an object of this kind may sit under `parent` (`None` = root).
    pub fn accepts_parent(self, parent: Option<ObjectKind>) -> bool {
        use ObjectKind::*;
        matches!(
            (self, parent),
            (Project, None)
                | (Screen, None)
                | (Dataset, None)
                | (Dataset, Some(Project))
                | (Plate, Some(Screen))
                | (Image, Some(Dataset))
                | (Image, Some(Plate))
        )
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown object kind {0:?}")]
pub struct ParseKindError(String);

impl FromStr for ObjectKind {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [ObjectKind::Project, ObjectKind::Dataset, ObjectKind::Screen, ObjectKind::Plate, ObjectKind::Image]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ParseKindError(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoObject {
    pub id: u64,
    pub kind: ObjectKind,
    pub name: String,
    pub owner: String,
    pub group: String,
    pub parent_id: Option<u64>,
    pub acquired_at: Option<Timestamp>,
    pub imported_at: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferMode {
    Copy,
    InPlace,
}

impl TransferMode {
    fn as_str(self) -> &'static str {
        match self {
            TransferMode::Copy => "COPY",
            TransferMode::InPlace => "IN_PLACE",
        }
    }
}

impl FromStr for TransferMode {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "COPY" => Ok(TransferMode::Copy),
            "IN_PLACE" => Ok(TransferMode::InPlace),
            other => Err(ParseKindError(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilesetEntry {
    pub link_path: PathBuf,
    pub target_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fileset {
    pub id: u64,
    pub group: String,
    pub image_ids: Vec<u64>,
    pub entries: Vec<FilesetEntry>,
    pub transfer_mode: TransferMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyValueBlock {
    pub id: u64,
    pub object_id: u64,
    pub namespace: String,
    pub pairs: Vec<(String, String)>,
}

impl KeyValueBlock {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> Vec<&str> {
        self.pairs.iter().map(|(k, _)| k.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAttachment {
    pub id: u64,
    pub object_id: u64,
    pub namespace: String,
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("a {child} cannot be placed under {parent}")]
    IllegalParent { child: ObjectKind, parent: String },
    #[error("unknown object {0}")]
    UnknownObject(u64),
    #[error("object id {0} already exists")]
    DuplicateId(u64),
    #[error("import target {0} does not exist")]
    TargetMissing(PathBuf),
    #[error("destination {0} is not a dataset or plate")]
    BrokenDestination(u64),
    #[error("fileset has no entries")]
    EmptyFileset,
    #[error("two entries share the file name {0:?}")]
    DuplicateEntry(String),
    #[error("fileset {fileset} has no link {link}")]
    UnknownLink { fileset: u64, link: PathBuf },
    #[error("new link target {0} does not exist")]
    NewTargetMissing(PathBuf),
    #[error("key {0:?} appears twice in one block")]
    DuplicateKeyInBlock(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for RepoError {
    fn from(err: rusqlite::Error) -> Self {
        RepoError::Store(err.into())
    }
}

impl From<serde_json::Error> for RepoError {
    fn from(err: serde_json::Error) -> Self {
        RepoError::Store(err.into())
    }
}

impl RepoError {
    pub fn code(&self) -> &'static str {
        match self {
            RepoError::IllegalParent { .. } => "ILLEGAL_PARENT",
            RepoError::UnknownObject(_) => "UNKNOWN_OBJECT",
            RepoError::DuplicateId(_) => "DUPLICATE_ID",
            RepoError::TargetMissing(_) => "TARGET_MISSING",
            RepoError::BrokenDestination(_) => "BROKEN_DESTINATION",
            RepoError::EmptyFileset => "EMPTY_FILESET",
            RepoError::DuplicateEntry(_) => "DUPLICATE_ENTRY",
            RepoError::UnknownLink { .. } => "UNKNOWN_LINK",
            RepoError::NewTargetMissing(_) => "NEW_TARGET_MISSING",
            RepoError::DuplicateKeyInBlock(_) => "DUPLICATE_KEY_IN_BLOCK",
            RepoError::Io(_) | RepoError::Store(_) => "STORE_ERROR",
        }
    }
}

type Result<T, E = RepoError> = std::result::Result<T, E>;

const OBJECT_COLUMNS: &str = "id, kind, name, owner, grp, parent_id, acquired_at, imported_at";

fn text_parse<T: FromStr>(row: &Row<'_>, idx: usize) -> rusqlite::Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let raw: String = row.get(idx)?;
    raw.parse().map_err(|e| rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e)))
}

fn opt_ts(row: &Row<'_>, idx: usize) -> rusqlite::Result<Option<Timestamp>> {
    let raw: Option<String> = row.get(idx)?;
    raw.map(|r| {
        r.parse().map_err(|e| rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e)))
    })
    .transpose()
}

fn object_from_row(row: &Row<'_>) -> rusqlite::Result<RepoObject> {
    Ok(RepoObject {
        id: row.get::<_, i64>(0)? as u64,
        kind: text_parse(row, 1)?,
        name: row.get(2)?,
        owner: row.get(3)?,
        group: row.get(4)?,
        parent_id: row.get::<_, Option<i64>>(5)?.map(|p| p as u64),
        acquired_at: opt_ts(row, 6)?,
        imported_at: opt_ts(row, 7)?,
    })
}

fn load_object(tx: &rusqlite::Connection, id: u64) -> Result<Option<RepoObject>> {
    Ok(tx
        .query_row(&format!("SELECT {OBJECT_COLUMNS} FROM repo_objects WHERE id = ?1"), [id as i64], object_from_row)
        .optional()?)
}

fn insert_block(tx: &Transaction<'_>, object_id: u64, namespace: &str, pairs: &[(String, String)]) -> Result<u64> {
    tx.execute("INSERT INTO kv_blocks (object_id, namespace) VALUES (?1, ?2)", params![object_id as i64, namespace])?;
    let block_id = tx.last_insert_rowid() as u64;
    for (pos, (key, value)) in pairs.iter().enumerate() {
        tx.execute(
            "INSERT INTO kv_pairs (block_id, pos, key, value) VALUES (?1, ?2, ?3, ?4)",
            params![block_id as i64, pos as i64, key, value],
        )?;
    }
    Ok(block_id)
}

/// New object description for [`ImageRepo::create_object`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewObject {
    pub kind: ObjectKind,
    pub name: String,
    pub owner: String,
    pub group: String,
    pub parent_id: Option<u64>,
    #[serde(default)]
    pub acquired_at: Option<Timestamp>,
}

impl NewObject {
    pub fn new(kind: ObjectKind, name: impl Into<String>, owner: impl Into<String>, group: impl Into<String>) -> Self {
        NewObject { kind, name: name.into(), owner: owner.into(), group: group.into(), parent_id: None, acquired_at: None }
    }

    pub fn under(mut self, parent_id: u64) -> Self {
        self.parent_id = Some(parent_id);
        self
    }
}

/// One file to register in a fileset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilesetRequest {
    pub image_names: Vec<String>,
    pub destination_id: u64,
    pub targets: Vec<PathBuf>,
    pub transfer_mode: TransferMode,
    pub owner: String,
    pub group: String,
}

#[derive(Debug, Clone)]
pub struct ImageRepo {
    db: Database,
    managed_root: PathBuf,
}

impl ImageRepo {
    pub fn new(db: Database, managed_root: impl Into<PathBuf>) -> Self {
        ImageRepo { db, managed_root: managed_root.into() }
    }

    pub fn managed_root(&self) -> &Path {
        &self.managed_root
    }

    pub fn create_object(&self, object: NewObject) -> Result<RepoObject> {
        self.insert_object(None, object)
    }

    /// Like [`create_object`](Self::create_object) with a caller-chosen id.
    pub fn create_object_with_id(&self, id: u64, object: NewObject) -> Result<RepoObject> {
        self.insert_object(Some(id), object)
    }

    fn insert_object(&self, id: Option<u64>, object: NewObject) -> Result<RepoObject> {
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let created = insert_object_tx(&tx, id, &object, None)?;
        tx.commit()?;
        Ok(created)
    }

    pub fn get_object(&self, id: u64) -> Result<RepoObject> {
        load_object(&self.db.lock(), id)?.ok_or(RepoError::UnknownObject(id))
    }

    /// Children ordered by id; `None` lists root objects.
    pub fn list_children(&self, parent_id: Option<u64>) -> Result<Vec<RepoObject>> {
        let conn = self.db.lock();
        let mut stmt;
        let rows = match parent_id {
            Some(parent) => {
                if load_object(&conn, parent)?.is_none() {
                    return Err(RepoError::UnknownObject(parent));
                }
                stmt = conn.prepare(&format!(
                    "SELECT {OBJECT_COLUMNS} FROM repo_objects WHERE parent_id = ?1 ORDER BY id"
                ))?;
                stmt.query_map([parent as i64], object_from_row)?.collect::<rusqlite::Result<Vec<_>>>()?
            }
            None => {
                stmt = conn.prepare(&format!(
                    "SELECT {OBJECT_COLUMNS} FROM repo_objects WHERE parent_id IS NULL ORDER BY id"
                ))?;
                stmt.query_map([], object_from_row)?.collect::<rusqlite::Result<Vec<_>>>()?
            }
        };
        Ok(rows)
    }

    /// Images below a container at any depth (a Screen reaches through its plates).
    pub fn descendant_images(&self, container_id: u64) -> Result<Vec<RepoObject>> {
        let mut images = Vec::new();
        let mut frontier = vec![container_id];
        while let Some(id) = frontier.pop() {
            for child in self.list_children(Some(id))? {
                if child.kind == ObjectKind::Image {
                    images.push(child);
                } else {
                    frontier.push(child.id);
                }
            }
        }
        images.sort_by_key(|o| o.id);
        Ok(images)
    }

    pub fn register_fileset(&self, request: FilesetRequest) -> Result<(Fileset, Vec<u64>)> {
        if request.targets.is_empty() || request.image_names.is_empty() {
            return Err(RepoError::EmptyFileset);
        }
        let mut targets = Vec::with_capacity(request.targets.len());
        let mut names = std::collections::HashSet::new();
        for target in &request.targets {
            if !target.is_file() {
                return Err(RepoError::TargetMissing(target.clone()));
            }
            let name = target
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| RepoError::TargetMissing(target.clone()))?;
            if !names.insert(name.clone()) {
                return Err(RepoError::DuplicateEntry(name));
            }
            targets.push((std::path::absolute(target)?, name));
        }

        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        match load_object(&tx, request.destination_id)? {
            Some(dest) if matches!(dest.kind, ObjectKind::Dataset | ObjectKind::Plate) => {}
            _ => return Err(RepoError::BrokenDestination(request.destination_id)),
        }

        tx.execute(
            "INSERT INTO filesets (grp, transfer_mode, image_ids) VALUES (?1, ?2, '[]')",
            params![request.group, request.transfer_mode.as_str()],
        )?;
        let fileset_id = tx.last_insert_rowid() as u64;
        let dir = self.managed_root.join(&request.group).join(fileset_id.to_string());

        let result = (|| -> Result<(Vec<FilesetEntry>, Vec<u64>)> {
            fs::create_dir_all(&dir)?;
            let mut entries = Vec::new();
            for (pos, (target, name)) in targets.iter().enumerate() {
                let link_path = dir.join(name);
                match request.transfer_mode {
                    TransferMode::InPlace => symlink(target, &link_path)?,
                    TransferMode::Copy => {
                        fs::copy(target, &link_path)?;
                    }
                }
                tx.execute(
                    "INSERT INTO fileset_entries (fileset_id, pos, link_path, target_path) VALUES (?1, ?2, ?3, ?4)",
                    params![fileset_id as i64, pos as i64, path_text(&link_path), path_text(target)],
                )?;
                entries.push(FilesetEntry { link_path, target_path: target.clone() });
            }
            let now = self.db.now();
            let mut image_ids = Vec::new();
            for name in &request.image_names {
                let image = insert_object_tx(
                    &tx,
                    None,
                    &NewObject::new(ObjectKind::Image, name.clone(), request.owner.clone(), request.group.clone())
                        .under(request.destination_id),
                    Some(now),
                )?;
                if request.transfer_mode == TransferMode::InPlace {
                    insert_block(
                        &tx,
                        image.id,
                        TRANSFER_NAMESPACE,
                        &[("transfer".to_string(), IN_PLACE_TRANSFER.to_string())],
                    )?;
                }
                image_ids.push(image.id);
            }
            tx.execute(
                "UPDATE filesets SET image_ids = ?2 WHERE id = ?1",
                params![fileset_id as i64, serde_json::to_string(&image_ids)?],
            )?;
            Ok((entries, image_ids))
        })();

        match result {
            Ok((entries, image_ids)) => {
                tx.commit()?;
                let fileset = Fileset {
                    id: fileset_id,
                    group: request.group,
                    image_ids: image_ids.clone(),
                    entries,
                    transfer_mode: request.transfer_mode,
                };
                Ok((fileset, image_ids))
            }
            Err(err) => {
                let _ = fs::remove_dir_all(&dir);
                Err(err)
            }
        }
    }

    pub fn get_fileset(&self, fileset_id: u64) -> Result<Option<Fileset>> {
        let conn = self.db.lock();
        load_fileset(&conn, fileset_id)
    }

    pub fn list_filesets(&self) -> Result<Vec<Fileset>> {
        let conn = self.db.lock();
        let ids: Vec<i64> = conn
            .prepare("SELECT id FROM filesets ORDER BY id")?
            .query_map([], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        ids.into_iter().filter_map(|id| load_fileset(&conn, id as u64).transpose()).collect()
    }

    pub fn fileset_of_image(&self, image_id: u64) -> Result<Option<Fileset>> {
        Ok(self.list_filesets()?.into_iter().find(|f| f.image_ids.contains(&image_id)))
    }

    /// Points an in-place link at a different file. The old target is left alone.
    pub fn retarget_fileset_entry(&self, fileset_id: u64, link_path: &Path, new_target: &Path) -> Result<()> {
        let conn = self.db.lock();
        let fileset = load_fileset(&conn, fileset_id)?;
        let unknown = || RepoError::UnknownLink { fileset: fileset_id, link: link_path.to_path_buf() };
        let fileset = fileset.filter(|f| f.transfer_mode == TransferMode::InPlace).ok_or_else(unknown)?;
        let entry = fileset.entries.iter().find(|e| e.link_path == link_path).ok_or_else(unknown)?;
        if !new_target.is_file() {
            return Err(RepoError::NewTargetMissing(new_target.to_path_buf()));
        }
        let new_target = std::path::absolute(new_target)?;
        if entry.target_path == new_target {
            return Ok(());
        }
        let staging = link_path.with_file_name(format!(
            ".{}.retarget",
            link_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        let _ = fs::remove_file(&staging);
        symlink(&new_target, &staging)?;
        fs::rename(&staging, link_path)?;
        conn.execute(
            "UPDATE fileset_entries SET target_path = ?3 WHERE fileset_id = ?1 AND link_path = ?2",
            params![fileset_id as i64, path_text(link_path), path_text(&new_target)],
        )?;
        Ok(())
    }

    /// Appends a key-value block. Existing blocks are never touched.
    pub fn annotate(&self, object_id: u64, namespace: &str, pairs: Vec<(String, String)>) -> Result<KeyValueBlock> {
        let mut seen = std::collections::HashSet::new();
        if let Some((dup, _)) = pairs.iter().find(|(k, _)| !seen.insert(k.as_str())) {
            return Err(RepoError::DuplicateKeyInBlock(dup.clone()));
        }
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        if load_object(&tx, object_id)?.is_none() {
            return Err(RepoError::UnknownObject(object_id));
        }
        let id = insert_block(&tx, object_id, namespace, &pairs)?;
        tx.commit()?;
        Ok(KeyValueBlock { id, object_id, namespace: namespace.to_string(), pairs })
    }

    /// Blocks on an object, oldest first.
    pub fn get_annotations(&self, object_id: u64) -> Result<Vec<KeyValueBlock>> {
        let conn = self.db.lock();
        if load_object(&conn, object_id)?.is_none() {
            return Err(RepoError::UnknownObject(object_id));
        }
        let mut stmt = conn.prepare(
            "SELECT b.id, b.namespace, p.key, p.value FROM kv_blocks b LEFT JOIN kv_pairs p ON p.block_id = b.id \
             WHERE b.object_id = ?1 ORDER BY b.id, p.pos",
        )?;
        let mut rows = stmt.query([object_id as i64])?;
        let mut blocks: Vec<KeyValueBlock> = Vec::new();
        while let Some(row) = rows.next()? {
            let id = row.get::<_, i64>(0)? as u64;
            if blocks.last().is_none_or(|b| b.id != id) {
                blocks.push(KeyValueBlock { id, object_id, namespace: row.get(1)?, pairs: Vec::new() });
            }
            let key: Option<String> = row.get(2)?;
            if let Some(key) = key {
                let value: String = row.get(3)?;
                blocks.last_mut().expect("pushed").pairs.push((key, value));
            }
        }
        Ok(blocks)
    }

    /// Newest block in `namespace` on the object.
    pub fn latest_block(&self, object_id: u64, namespace: &str) -> Result<Option<KeyValueBlock>> {
        Ok(self.get_annotations(object_id)?.into_iter().rev().find(|b| b.namespace == namespace))
    }

    /// Objects with an annotation value equal to `query`, plus objects whose
    /// name contains it. Ordered by id.
    pub fn search_by_value(&self, query: &str) -> Result<Vec<RepoObject>> {
        if query.is_empty() {
            return Ok(Vec::new());
        }
        let conn = self.db.lock();
        let mut stmt = conn.prepare(&format!(
            "SELECT {OBJECT_COLUMNS} FROM repo_objects WHERE id IN ( \
                 SELECT b.object_id FROM kv_pairs p JOIN kv_blocks b ON b.id = p.block_id WHERE p.value = ?1 \
             ) OR instr(name, ?1) > 0 ORDER BY id"
        ))?;
        let rows = stmt.query_map([query], object_from_row)?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }

    /// Copies `source` into the managed repository as an attachment of the object.
    pub fn attach_file(&self, object_id: u64, namespace: &str, source: &Path, name: &str) -> Result<FileAttachment> {
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let object = load_object(&tx, object_id)?.ok_or(RepoError::UnknownObject(object_id))?;
        if !source.is_file() {
            return Err(RepoError::TargetMissing(source.to_path_buf()));
        }
        tx.execute(
            "INSERT INTO file_attachments (object_id, namespace, name, path) VALUES (?1, ?2, ?3, '')",
            params![object_id as i64, namespace, name],
        )?;
        let id = tx.last_insert_rowid() as u64;
        let dir = self.managed_root.join(&object.group).join("attachments").join(id.to_string());
        fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        fs::copy(source, &path)?;
        tx.execute("UPDATE file_attachments SET path = ?2 WHERE id = ?1", params![id as i64, path_text(&path)])?;
        tx.commit()?;
        Ok(FileAttachment { id, object_id, namespace: namespace.to_string(), name: name.to_string(), path })
    }

    pub fn attachments(&self, object_id: u64) -> Result<Vec<FileAttachment>> {
        let conn = self.db.lock();
        let mut stmt = conn
            .prepare("SELECT id, namespace, name, path FROM file_attachments WHERE object_id = ?1 ORDER BY id")?;
        let rows = stmt.query_map([object_id as i64], |r| {
            Ok(FileAttachment {
                id: r.get::<_, i64>(0)? as u64,
                object_id,
                namespace: r.get(1)?,
                name: r.get(2)?,
                path: PathBuf::from(r.get::<_, String>(3)?),
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
    }
}

fn insert_object_tx(
    tx: &Transaction<'_>,
    id: Option<u64>,
    object: &NewObject,
    imported_at: Option<Timestamp>,
) -> Result<RepoObject> {
    let parent_kind = match object.parent_id {
        Some(pid) => Some(load_object(tx, pid)?.ok_or(RepoError::UnknownObject(pid))?.kind),
        None => None,
    };
    if !object.kind.accepts_parent(parent_kind) {
        return Err(RepoError::IllegalParent {
            child: object.kind,
            parent: parent_kind.map_or_else(|| "root".to_string(), |k| k.to_string()),
        });
    }
    if let Some(id) = id {
        if id == 0 || id > i64::MAX as u64 {
            return Err(RepoError::UnknownObject(id));
        }
        if load_object(tx, id)?.is_some() {
            return Err(RepoError::DuplicateId(id));
        }
    }
    tx.execute(
        &format!("INSERT INTO repo_objects ({OBJECT_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)"),
        params![
            id.map(|i| i as i64),
            object.kind.as_str(),
            object.name,
            object.owner,
            object.group,
            object.parent_id.map(|p| p as i64),
            object.acquired_at.map(|t| t.to_string()),
            imported_at.map(|t| t.to_string()),
        ],
    )?;
    Ok(RepoObject {
        id: tx.last_insert_rowid() as u64,
        kind: object.kind,
        name: object.name.clone(),
        owner: object.owner.clone(),
        group: object.group.clone(),
        parent_id: object.parent_id,
        acquired_at: object.acquired_at,
        imported_at,
    })
}

fn load_fileset(conn: &rusqlite::Connection, fileset_id: u64) -> Result<Option<Fileset>> {
    let head: Option<(String, String, String)> = conn
        .query_row(
            "SELECT grp, transfer_mode, image_ids FROM filesets WHERE id = ?1",
            [fileset_id as i64],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
        )
        .optional()?;
    let Some((group, mode, image_ids)) = head else {
        return Ok(None);
    };
    let mut stmt =
        conn.prepare("SELECT link_path, target_path FROM fileset_entries WHERE fileset_id = ?1 ORDER BY pos")?;
    let entries = stmt
        .query_map([fileset_id as i64], |r| {
            Ok(FilesetEntry {
                link_path: PathBuf::from(r.get::<_, String>(0)?),
                target_path: PathBuf::from(r.get::<_, String>(1)?),
            })
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(Some(Fileset {
        id: fileset_id,
        group,
        image_ids: serde_json::from_str(&image_ids)?,
        entries,
        transfer_mode: mode.parse().map_err(|e: ParseKindError| StoreError::Corrupt(e.to_string()))?,
    }))
}

fn path_text(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

#[cfg(unix)]
fn symlink(target: &Path, link: &Path) -> std::io::Result<()> {
    std::os::unix::fs::symlink(target, link)
}

#[cfg(windows)]
fn symlink(target: &Path, link: &Path) -> std::io::Result<()> {
    std::os::windows::fs::symlink_file(target, link)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo() -> (tempfile::TempDir, ImageRepo) {
        let tmp = tempfile::tempdir().unwrap();
        let repo = ImageRepo::new(Database::open_in_memory().unwrap(), tmp.path().join("ManagedRepository"));
        (tmp, repo)
    }

    #[test]
    fn parent_rules() {
        let (_tmp, repo) = repo();
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "Dataset 1", "luik", "Reits")).unwrap();
        assert!(ds.id > 0);
        let screen = repo
            .create_object_with_id(533, NewObject::new(ObjectKind::Screen, "experiment", "luik", "Reits"))
            .unwrap();
        assert_eq!(screen.id, 533);
        repo.create_object(NewObject::new(ObjectKind::Plate, "plate", "luik", "Reits").under(533)).unwrap();
        let err = repo.create_object(NewObject::new(ObjectKind::Image, "img", "luik", "Reits").under(533)).unwrap_err();
        assert_eq!(err.code(), "ILLEGAL_PARENT");
        let err = repo.create_object(NewObject::new(ObjectKind::Image, "img", "luik", "Reits")).unwrap_err();
        assert_eq!(err.code(), "ILLEGAL_PARENT");
        let err = repo.create_object_with_id(533, NewObject::new(ObjectKind::Screen, "dup", "l", "R")).unwrap_err();
        assert_eq!(err.code(), "DUPLICATE_ID");
    }

    #[test]
    fn fresh_dataset_has_no_children() {
        let (_tmp, repo) = repo();
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "d", "u", "g")).unwrap();
        assert!(repo.list_children(Some(ds.id)).unwrap().is_empty());
        assert_eq!(repo.list_children(Some(999)).unwrap_err().code(), "UNKNOWN_OBJECT");
    }

    #[test]
    fn annotation_rules() {
        let (_tmp, repo) = repo();
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "d", "u", "g")).unwrap();
        let empty = repo.annotate(ds.id, "ns", vec![]).unwrap();
        assert!(empty.pairs.is_empty());
        let err = repo
            .annotate(ds.id, "ns", vec![("k".into(), "1".into()), ("k".into(), "2".into())])
            .unwrap_err();
        assert_eq!(err.code(), "DUPLICATE_KEY_IN_BLOCK");
        assert_eq!(repo.annotate(42, "ns", vec![]).unwrap_err().code(), "UNKNOWN_OBJECT");
        repo.annotate(ds.id, "ns", vec![("b".into(), "2".into()), ("a".into(), "1".into())]).unwrap();
        let blocks = repo.get_annotations(ds.id).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks[0].pairs.is_empty());
        assert_eq!(blocks[1].keys(), ["b", "a"]);
    }

    #[test]
    fn search_is_exact_on_values_and_substring_on_names() {
        let (_tmp, repo) = repo();
        let a = repo.create_object(NewObject::new(ObjectKind::Dataset, "spinal cord", "u", "g")).unwrap();
        let b = repo.create_object(NewObject::new(ObjectKind::Dataset, "other", "u", "g")).unwrap();
        repo.annotate(b.id, "ns", vec![("UUID".into(), "633836c7-0a0f-4621-809a-1ee3e7e0b44d".into())]).unwrap();
        let hits = repo.search_by_value("633836c7-0a0f-4621-809a-1ee3e7e0b44d").unwrap();
        assert_eq!(hits.iter().map(|o| o.id).collect::<Vec<_>>(), [b.id]);
        assert!(repo.search_by_value("633836c7").unwrap().is_empty());
        assert_eq!(repo.search_by_value("spinal").unwrap()[0].id, a.id);
        assert!(repo.search_by_value("no-such-value").unwrap().is_empty());
        assert!(repo.search_by_value("").unwrap().is_empty());
    }

    #[test]
    fn copy_mode_duplicates_bytes() {
        let (tmp, repo) = repo();
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "d", "u", "g")).unwrap();
        let src = tmp.path().join("mask.tif");
        fs::write(&src, b"mask-bytes").unwrap();
        let (fileset, images) = repo
            .register_fileset(FilesetRequest {
                image_names: vec!["mask.tif".into()],
                destination_id: ds.id,
                targets: vec![src.clone()],
                transfer_mode: TransferMode::Copy,
                owner: "u".into(),
                group: "g".into(),
            })
            .unwrap();
        assert_eq!(images.len(), 1);
        let link = &fileset.entries[0].link_path;
        assert!(!fs::symlink_metadata(link).unwrap().file_type().is_symlink());
        assert_eq!(fs::read(link).unwrap(), b"mask-bytes");
        assert!(link.ends_with(format!("g/{}/mask.tif", fileset.id)));
    }

    #[test]
    fn missing_target_and_bad_destination() {
        let (tmp, repo) = repo();
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "d", "u", "g")).unwrap();
        let screen = repo.create_object(NewObject::new(ObjectKind::Screen, "s", "u", "g")).unwrap();
        let mut req = FilesetRequest {
            image_names: vec!["x".into()],
            destination_id: ds.id,
            targets: vec![tmp.path().join("absent.czi")],
            transfer_mode: TransferMode::InPlace,
            owner: "u".into(),
            group: "g".into(),
        };
        assert_eq!(repo.register_fileset(req.clone()).unwrap_err().code(), "TARGET_MISSING");
        let present = tmp.path().join("present.czi");
        fs::write(&present, b"x").unwrap();
        req.targets = vec![present];
        req.destination_id = screen.id;
        assert_eq!(repo.register_fileset(req).unwrap_err().code(), "BROKEN_DESTINATION");
    }

    #[test]
    fn retarget_rules() {
        let (tmp, repo) = repo();
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "d", "u", "g")).unwrap();
        let local = tmp.path().join("work/converted.ome.tiff");
        let remote = tmp.path().join("remote/_converted/converted.ome.tiff");
        for p in [&local, &remote] {
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, b"tiff").unwrap();
        }
        let (fileset, _) = repo
            .register_fileset(FilesetRequest {
                image_names: vec!["converted.ome.tiff".into()],
                destination_id: ds.id,
                targets: vec![local.clone()],
                transfer_mode: TransferMode::InPlace,
                owner: "u".into(),
                group: "g".into(),
            })
            .unwrap();
        let link = fileset.entries[0].link_path.clone();
        repo.retarget_fileset_entry(fileset.id, &link, &remote).unwrap();
        assert_eq!(fs::read_link(&link).unwrap(), remote);
        // same target again is a no-op
        repo.retarget_fileset_entry(fileset.id, &link, &remote).unwrap();
        assert!(local.exists(), "old target untouched");
        let stored = repo.get_fileset(fileset.id).unwrap().unwrap();
        assert_eq!(stored.entries[0].target_path, remote);
        assert_eq!(
            repo.retarget_fileset_entry(fileset.id, &link, &tmp.path().join("nope")).unwrap_err().code(),
            "NEW_TARGET_MISSING"
        );
        assert_eq!(
            repo.retarget_fileset_entry(fileset.id, &tmp.path().join("x"), &remote).unwrap_err().code(),
            "UNKNOWN_LINK"
        );
    }
}
