//! Versioned metadata form templates and immutable submissions.
//!
//! A schema is a JSON object mapping field names to
//! `{"type": string|number|boolean|enum|object, "required": bool,
//! "options": [...], "term_accession": "...", "fields": {...}}`;
//! `fields` is only meaningful for `object`. Field order is significant.

use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::repo::{ImageRepo, RepoError};
use crate::store::{Database, StoreError};
use crate::time::Timestamp;

pub const FORMS_NAMESPACE_PREFIX: &str = "omero.forms/";

pub fn forms_namespace(form_id: &str) -> String {
    format!("{FORMS_NAMESPACE_PREFIX}{form_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    String,
    Number,
    Boolean,
    Enum,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub field_type: FieldType,
    pub required: bool,
    pub options: Vec<String>,
    pub term_accession: Option<String>,
    pub fields: Vec<FieldSpec>,
}

/// Parsed view of a template schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FormSchema {
    pub fields: Vec<FieldSpec>,
}

impl FormSchema {
    pub fn parse(schema: &Value) -> Result<Self, FormsError> {
        let obj = schema.as_object().ok_or_else(|| malformed("", "schema must be a JSON object"))?;
        Ok(FormSchema { fields: parse_fields(obj, "")? })
    }
}

fn malformed(path: &str, why: &str) -> FormsError {
    if path.is_empty() {
        FormsError::MalformedSchema(why.to_string())
    } else {
        FormsError::MalformedSchema(format!("{path}: {why}"))
    }
}

fn parse_fields(obj: &Map<String, Value>, prefix: &str) -> Result<Vec<FieldSpec>, FormsError> {
    let mut fields = Vec::new();
    for (name, spec) in obj {
        let path = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
        if name.is_empty() {
            return Err(malformed(prefix, "empty field name"));
        }
        let spec = spec.as_object().ok_or_else(|| malformed(&path, "field spec must be an object"))?;
        let field_type = match spec.get("type").and_then(Value::as_str) {
            Some("string") => FieldType::String,
            Some("number") => FieldType::Number,
            Some("boolean") => FieldType::Boolean,
            Some("enum") => FieldType::Enum,
            Some("object") => FieldType::Object,
            Some(other) => return Err(malformed(&path, &format!("unknown type {other:?}"))),
            None => return Err(malformed(&path, "missing type")),
        };
        let required = match spec.get("required") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(malformed(&path, "required must be a boolean")),
        };
        let options = match spec.get("options") {
            None => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|i| i.as_str().map(str::to_string).ok_or_else(|| malformed(&path, "options must be strings")))
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(malformed(&path, "options must be an array")),
        };
        if field_type == FieldType::Enum && options.is_empty() {
            return Err(malformed(&path, "enum needs options"));
        }
        let term_accession = match spec.get("term_accession") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(malformed(&path, "term_accession must be a string")),
        };
        let nested = match (field_type, spec.get("fields")) {
            (FieldType::Object, Some(Value::Object(inner))) => parse_fields(inner, &path)?,
            (FieldType::Object, _) => return Err(malformed(&path, "object needs fields")),
            (_, None) => Vec::new(),
            (_, Some(_)) => return Err(malformed(&path, "only objects have fields")),
        };
        fields.push(FieldSpec { name: name.clone(), field_type, required, options, term_accession, fields: nested });
    }
    Ok(fields)
}

/// Every problem found in `values`, as `path: reason`.
pub fn validate(schema: &FormSchema, values: &Value) -> Vec<String> {
    let mut problems = Vec::new();
    match values.as_object() {
        Some(obj) => check_object(&schema.fields, obj, "", &mut problems),
        None => problems.push("values must be a JSON object".to_string()),
    }
    problems
}

fn check_object(fields: &[FieldSpec], obj: &Map<String, Value>, prefix: &str, problems: &mut Vec<String>) {
    let join = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
    for key in obj.keys() {
        if !fields.iter().any(|f| &f.name == key) {
            problems.push(format!("{}: unknown field", join(key)));
        }
    }
    for field in fields {
        let path = join(&field.name);
        let value = match obj.get(&field.name) {
            None | Some(Value::Null) => {
                if field.required {
                    problems.push(format!("{path}: required"));
                }
                continue;
            }
            Some(v) => v,
        };
        let ok = match field.field_type {
            FieldType::String => value.is_string(),
            FieldType::Number => value.is_number(),
            FieldType::Boolean => value.is_boolean(),
            FieldType::Enum => value.as_str().is_some_and(|s| field.options.iter().any(|o| o == s)),
            FieldType::Object => match value.as_object() {
                Some(inner) => {
                    check_object(&field.fields, inner, &path, problems);
                    true
                }
                None => false,
            },
        };
        if !ok {
            let expected = match field.field_type {
                FieldType::Enum => format!("one of {:?}", field.options),
                other => format!("{other:?}").to_lowercase(),
            };
            problems.push(format!("{path}: expected {expected}"));
        }
    }
}

fn scalar_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flattens `values` in schema field order, joining nested names with `_`.
pub fn flatten_to_kv(schema: &FormSchema, values: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(obj) = values.as_object() {
        flatten_fields(&schema.fields, obj, "", &mut out);
    }
    out
}

fn flatten_fields(fields: &[FieldSpec], obj: &Map<String, Value>, prefix: &str, out: &mut Vec<(String, String)>) {
    for field in fields {
        let key = if prefix.is_empty() { field.name.clone() } else { format!("{prefix}_{}", field.name) };
        match obj.get(&field.name) {
            None | Some(Value::Null) => {}
            Some(Value::Object(inner)) => flatten_fields(&field.fields, inner, &key, out),
            Some(v) => out.push((key, scalar_text(v))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormTemplate {
    pub form_id: String,
    pub version: u32,
    pub schema: Value,
    pub published_at: Timestamp,
    pub published_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormSubmission {
    pub submission_id: String,
    pub form_id: String,
    pub form_version: u32,
    pub object_id: u64,
    pub values: Value,
    pub submitted_by: String,
    pub submitted_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum FormsError {
    #[error("{0} is not an administrator")]
    NotAdmin(String),
    #[error("malformed schema: {0}")]
    MalformedSchema(String),
    #[error("invalid form id {0:?}")]
    InvalidFormId(String),
    #[error("unknown template {form_id} v{version}")]
    UnknownTemplate { form_id: String, version: u32 },
    #[error("validation failed: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("unknown object {0}")]
    UnknownObject(u64),
    #[error("template {form_id} v{version} already exists with different content")]
    Conflict { form_id: String, version: u32 },
    #[error(transparent)]
    Repo(RepoError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<RepoError> for FormsError {
    fn from(err: RepoError) -> Self {
        match err {
            RepoError::UnknownObject(id) => FormsError::UnknownObject(id),
            other => FormsError::Repo(other),
        }
    }
}

impl From<rusqlite::Error> for FormsError {
    fn from(err: rusqlite::Error) -> Self {
        FormsError::Store(err.into())
    }
}

impl From<serde_json::Error> for FormsError {
    fn from(err: serde_json::Error) -> Self {
        FormsError::Store(err.into())
    }
}

impl FormsError {
    pub fn code(&self) -> &'static str {
        match self {
            FormsError::NotAdmin(_) => "NOT_ADMIN",
            FormsError::MalformedSchema(_) => "MALFORMED_SCHEMA",
            FormsError::InvalidFormId(_) => "INVALID_FORM_ID",
            FormsError::UnknownTemplate { .. } => "UNKNOWN_TEMPLATE",
            FormsError::ValidationFailed(_) => "VALIDATION_FAILED",
            FormsError::UnknownObject(_) => "UNKNOWN_OBJECT",
            FormsError::Conflict { .. } => "CONFLICT",
            FormsError::Repo(e) => e.code(),
            FormsError::Store(_) => "STORE_ERROR",
        }
    }
}

type Result<T, E = FormsError> = std::result::Result<T, E>;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_form_id(form_id: &str) -> bool {
    !form_id.is_empty() && form_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Debug, Clone)]
pub struct FormsRegistry {
    db: Database,
    repo: ImageRepo,
}

impl FormsRegistry {
    pub fn new(db: Database, repo: ImageRepo) -> Self {
        FormsRegistry { db, repo }
    }

    pub fn publish_template(&self, form_id: &str, schema: Value, publisher: &str, is_admin: bool) -> Result<FormTemplate> {
        if !is_admin {
            return Err(FormsError::NotAdmin(publisher.to_string()));
        }
        if !valid_form_id(form_id) {
            return Err(FormsError::InvalidFormId(form_id.to_string()));
        }
        FormSchema::parse(&schema)?;
        let mut conn = self.db.lock();
        let tx = conn.transaction()?;
        let latest: Option<i64> =
            tx.query_row("SELECT MAX(version) FROM form_templates WHERE form_id = ?1", [form_id], |r| r.get(0))?;
        let template = FormTemplate {
            form_id: form_id.to_string(),
            version: latest.unwrap_or(0) as u32 + 1,
            schema,
            published_at: self.db.now(),
            published_by: publisher.to_string(),
        };
        tx.execute(
            "INSERT INTO form_templates (form_id, version, body) VALUES (?1, ?2, ?3)",
            params![template.form_id, template.version, serde_json::to_string(&template)?],
        )?;
        tx.commit()?;
        tracing::info!(form_id, version = template.version, "template published");
        Ok(template)
    }

    fn template_body(&self, form_id: &str, version: u32) -> Result<String> {
        self.db
            .lock()
            .query_row(
                "SELECT body FROM form_templates WHERE form_id = ?1 AND version = ?2",
                params![form_id, version],
                |r| r.get(0),
            )
            .optional()?
            .ok_or_else(|| FormsError::UnknownTemplate { form_id: form_id.to_string(), version })
    }

    pub fn get_template(&self, form_id: &str, version: u32) -> Result<FormTemplate> {
        Ok(serde_json::from_str(&self.template_body(form_id, version)?)?)
    }

    pub fn latest_template(&self, form_id: &str) -> Result<FormTemplate> {
        let version = self.versions(form_id)?.last().copied().ok_or_else(|| FormsError::UnknownTemplate {
            form_id: form_id.to_string(),
            version: 0,
        })?;
        self.get_template(form_id, version)
    }

    pub fn versions(&self, form_id: &str) -> Result<Vec<u32>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare("SELECT version FROM form_templates WHERE form_id = ?1 ORDER BY version")?;
        let rows = stmt.query_map([form_id], |r| r.get::<_, u32>(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Every stored template version ordered by form id then version.
    pub fn list_templates(&self) -> Result<Vec<FormTemplate>> {
        let conn = self.db.lock();
        let mut stmt = conn.prepare("SELECT body FROM form_templates ORDER BY form_id, version")?;
        let bodies = stmt.query_map([], |r| r.get::<_, String>(0))?.collect::<rusqlite::Result<Vec<_>>>()?;
        bodies.iter().map(|b| Ok(serde_json::from_str(b)?)).collect()
    }

    /// Hex sha256 of the stored template bytes.
    pub fn template_hash(&self, form_id: &str, version: u32) -> Result<String> {
        Ok(sha256_hex(self.template_body(form_id, version)?.as_bytes()))
    }

    pub fn submit(
        &self,
        form_id: &str,
        form_version: u32,
        object_id: u64,
        values: Value,
        user: &str,
    ) -> Result<FormSubmission> {
        let template = self.get_template(form_id, form_version)?;
        let schema = FormSchema::parse(&template.schema)?;
        let problems = validate(&schema, &values);
        if !problems.is_empty() {
            return Err(FormsError::ValidationFailed(problems));
        }
        self.repo.get_object(object_id)?;
        let submission = FormSubmission {
            submission_id: uuid::Uuid::new_v4().to_string(),
            form_id: form_id.to_string(),
            form_version,
            object_id,
            values,
            submitted_by: user.to_string(),
            submitted_at: self.db.now(),
        };
        self.db.lock().execute(
            "INSERT INTO form_submissions (submission_id, form_id, object_id, body) VALUES (?1, ?2, ?3, ?4)",
            params![submission.submission_id, form_id, object_id as i64, serde_json::to_string(&submission)?],
        )?;
        self.repo.annotate(object_id, &forms_namespace(form_id), flatten_to_kv(&schema, &submission.values))?;
        Ok(submission)
    }

    /// Submissions for the pair, oldest first.
    pub fn history(&self, object_id: u64, form_id: &str) -> Result<Vec<FormSubmission>> {
        let conn = self.db.lock();
        let mut stmt =
            conn.prepare("SELECT body FROM form_submissions WHERE object_id = ?1 AND form_id = ?2 ORDER BY seq")?;
        let bodies =
            stmt.query_map(params![object_id as i64, form_id], |r| r.get::<_, String>(0))?.collect::<rusqlite::Result<Vec<_>>>()?;
        bodies.iter().map(|b| Ok(serde_json::from_str(b)?)).collect()
    }

    pub fn submission_hash(&self, submission_id: &str) -> Result<Option<String>> {
        let body: Option<String> = self
            .db
            .lock()
            .query_row("SELECT body FROM form_submissions WHERE submission_id = ?1", [submission_id], |r| r.get(0))
            .optional()?;
        Ok(body.map(|b| sha256_hex(b.as_bytes())))
    }

    pub fn flatten_submission(&self, submission: &FormSubmission) -> Result<Vec<(String, String)>> {
        let template = self.get_template(&submission.form_id, submission.form_version)?;
        Ok(flatten_to_kv(&FormSchema::parse(&template.schema)?, &submission.values))
    }

    pub fn export_template(&self, form_id: &str, version: u32) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.get_template(form_id, version)?)?)
    }

    /// Stores a template exported elsewhere under its original version.
    /// Importing an identical template again is a no-op.
    pub fn import_template(&self, json: &str) -> Result<FormTemplate> {
        let template: FormTemplate = serde_json::from_str(json)
            .map_err(|e| FormsError::MalformedSchema(format!("not a template document: {e}")))?;
        if !valid_form_id(&template.form_id) {
            return Err(FormsError::InvalidFormId(template.form_id));
        }
        if template.version == 0 {
            return Err(FormsError::MalformedSchema("version must be positive".into()));
        }
        FormSchema::parse(&template.schema)?;
        match self.get_template(&template.form_id, template.version) {
            Ok(existing) if existing == template => return Ok(existing),
            Ok(_) => return Err(FormsError::Conflict { form_id: template.form_id, version: template.version }),
            Err(FormsError::UnknownTemplate { .. }) => {}
            Err(other) => return Err(other),
        }
        self.db.lock().execute(
            "INSERT INTO form_templates (form_id, version, body) VALUES (?1, ?2, ?3)",
            params![template.form_id, template.version, serde_json::to_string(&template)?],
        )?;
        Ok(template)
    }
}
