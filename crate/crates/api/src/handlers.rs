use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::Json;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use fairflow::analyzer::registry::ConfigSections;
use fairflow::analyzer::{InputSelection, OutputOptions, RunRequest};
use fairflow::db::{OrderFilter, RunFilter};
use fairflow::importer::display_stage;
use fairflow::repo::RepoObject;
use fairflow::time::DateRange;
use fairflow::{ImportOrder, OrderRequest, OrderStatus, Principal, Timestamp};

use crate::{AdminSession, ApiError, Session, SharedState, ROUTES};

type ApiResult<T> = Result<T, ApiError>;
type JsonBody<T> = Result<Json<T>, JsonRejection>;
type QueryArgs<T> = Result<Query<T>, QueryRejection>;

fn date_range(state: &SharedState, raw: Option<&str>) -> ApiResult<Option<DateRange>> {
    match raw.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(s) if s.eq_ignore_ascii_case("today") => Ok(Some(DateRange::day(state.services.database.now().date()))),
        Some(s) => NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(|d| Some(DateRange::day(d)))
            .map_err(|_| ApiError::bad_request(format!("date {s:?}: expected YYYY-MM-DD or today"))),
    }
}

/// Group name filter for order queries. Non-admins are pinned to their own group.
fn order_scope(principal: &Principal, requested: Option<String>) -> ApiResult<Option<String>> {
    let requested = requested.filter(|g| !g.is_empty());
    if principal.is_admin {
        return Ok(requested);
    }
    match requested {
        Some(g) if g != principal.group => Err(ApiError::forbidden_group(&g)),
        _ => Ok(Some(principal.group.clone())),
    }
}

/// Group id filter for run queries. Non-admins are pinned to their own group.
fn run_scope(state: &SharedState, principal: &Principal, requested: Option<String>) -> ApiResult<Option<i64>> {
    let requested = requested.filter(|g| !g.is_empty());
    if principal.is_admin {
        // An unknown group name matches no run.
        return Ok(requested.map(|g| state.group_id(&g).unwrap_or(i64::MIN)));
    }
    match requested {
        Some(g) if g != principal.group && g != principal.group_id.to_string() => Err(ApiError::forbidden_group(&g)),
        _ => Ok(Some(principal.group_id)),
    }
}

fn visible(principal: &Principal, object: RepoObject) -> ApiResult<RepoObject> {
    if principal.can_see_group(&object.group) {
        Ok(object)
    } else {
        Err(ApiError::forbidden_group(&object.group))
    }
}

// ---- session --------------------------------------------------------------

#[derive(Deserialize)]
pub struct SessionBody {
    token: String,
}

pub async fn session(State(state): State<SharedState>, body: JsonBody<SessionBody>) -> ApiResult<Json<Principal>> {
    let Json(body) = body?;
    state.principal(&body.token).cloned().map(Json).ok_or_else(ApiError::unauthorized)
}

pub async fn routes() -> Json<Value> {
    Json(json!(ROUTES))
}

// ---- orders ---------------------------------------------------------------

pub async fn create_order(
    State(state): State<SharedState>,
    Session(principal): Session,
    body: JsonBody<OrderRequest>,
) -> ApiResult<(StatusCode, Json<ImportOrder>)> {
    let Json(request) = body?;
    let order = state.services.submit_order(request, &principal)?;
    Ok((StatusCode::CREATED, Json(order)))
}

#[derive(Deserialize, Default)]
pub struct OrderQuery {
    status: Option<String>,
    group: Option<String>,
    date: Option<String>,
}

fn query_orders(state: &SharedState, principal: &Principal, query: OrderQuery) -> ApiResult<Vec<ImportOrder>> {
    let status = match query.status.as_deref().filter(|s| !s.is_empty()) {
        Some(s) => Some(s.parse::<OrderStatus>().map_err(|_| ApiError::bad_request(format!("unknown status {s:?}")))?),
        None => None,
    };
    let filter = OrderFilter {
        status,
        group: order_scope(principal, query.group)?,
        date_range: date_range(state, query.date.as_deref())?,
    };
    Ok(state.services.db.list_orders(&filter)?)
}

pub async fn list_orders(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<OrderQuery>,
) -> ApiResult<Json<Vec<ImportOrder>>> {
    let Query(query) = query?;
    Ok(Json(query_orders(&state, &principal, query)?))
}

#[derive(Serialize)]
pub struct MonitorRow {
    uuid: String,
    username: String,
    group: String,
    destination: String,
    file_names: Vec<String>,
    status: OrderStatus,
    stage: String,
    created_at: Timestamp,
    updated_at: Timestamp,
    error_message: Option<String>,
}

pub async fn monitor_orders(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<OrderQuery>,
) -> ApiResult<Json<Vec<MonitorRow>>> {
    let Query(query) = query?;
    let rows = query_orders(&state, &principal, query)?
        .into_iter()
        .map(|o| MonitorRow {
            stage: display_stage(o.status),
            destination: format!("{}:{}", o.destination_type.as_str(), o.destination_id),
            uuid: o.uuid,
            username: o.username,
            group: o.group,
            file_names: o.file_names,
            status: o.status,
            created_at: o.created_at,
            updated_at: o.updated_at,
            error_message: o.error_message,
        })
        .collect();
    Ok(Json(rows))
}

// ---- mappings -------------------------------------------------------------

#[derive(Deserialize)]
pub struct MappingBody {
    group: String,
    subfolder: String,
}

#[derive(Deserialize)]
pub struct GroupQuery {
    group: String,
}

pub async fn list_mappings(State(state): State<SharedState>, _admin: AdminSession) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.services.db.list_mappings()?)))
}

pub async fn upsert_mapping(
    State(state): State<SharedState>,
    _admin: AdminSession,
    body: JsonBody<MappingBody>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body?;
    Ok(Json(json!(state.services.db.upsert_mapping(&body.group, &body.subfolder)?)))
}

pub async fn delete_mapping(
    State(state): State<SharedState>,
    _admin: AdminSession,
    query: QueryArgs<GroupQuery>,
) -> ApiResult<Json<Value>> {
    let Query(query) = query?;
    Ok(Json(json!(state.services.db.delete_mapping(&query.group)?)))
}

// ---- remote ---------------------------------------------------------------

#[derive(Deserialize, Default)]
pub struct RemoteQuery {
    #[serde(default)]
    path: String,
}

pub async fn browse_remote(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<RemoteQuery>,
) -> ApiResult<Json<Value>> {
    let Query(query) = query?;
    Ok(Json(json!(state.services.browse_remote(&query.path, &principal)?)))
}

// ---- forms ----------------------------------------------------------------

pub async fn list_templates(State(state): State<SharedState>, _session: Session) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.services.forms.list_templates()?)))
}

#[derive(Deserialize)]
pub struct TemplateBody {
    form_id: String,
    schema: Value,
}

pub async fn publish_template(
    State(state): State<SharedState>,
    Session(principal): Session,
    body: JsonBody<TemplateBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    let template =
        state.services.forms.publish_template(&body.form_id, body.schema, &principal.username, principal.is_admin)?;
    Ok((StatusCode::CREATED, Json(json!(template))))
}

#[derive(Deserialize)]
pub struct SubmissionBody {
    form_id: String,
    #[serde(default)]
    version: Option<u32>,
    object_id: u64,
    values: Value,
}

pub async fn submit_form(
    State(state): State<SharedState>,
    Session(principal): Session,
    body: JsonBody<SubmissionBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    visible(&principal, state.services.repo.get_object(body.object_id)?)?;
    let forms = &state.services.forms;
    let version = match body.version {
        Some(v) => v,
        None => forms.latest_template(&body.form_id)?.version,
    };
    let submission = forms.submit(&body.form_id, version, body.object_id, body.values, &principal.username)?;
    Ok((StatusCode::CREATED, Json(json!(submission))))
}

#[derive(Deserialize)]
pub struct HistoryQuery {
    object: u64,
    form: String,
}

pub async fn form_history(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<HistoryQuery>,
) -> ApiResult<Json<Value>> {
    let Query(query) = query?;
    visible(&principal, state.services.repo.get_object(query.object)?)?;
    let forms = &state.services.forms;
    let mut rows = Vec::new();
    for submission in forms.history(query.object, &query.form)? {
        let hash = forms.submission_hash(&submission.submission_id)?;
        let mut row = json!(submission);
        row["hash"] = json!(hash);
        rows.push(row);
    }
    Ok(Json(Value::Array(rows)))
}

// ---- workflows and runs ---------------------------------------------------

#[derive(Deserialize, Default)]
pub struct WorkflowQuery {
    filter: Option<String>,
}

pub async fn list_workflows(
    State(state): State<SharedState>,
    _session: Session,
    query: QueryArgs<WorkflowQuery>,
) -> ApiResult<Json<Value>> {
    let Query(query) = query?;
    Ok(Json(json!(state.services.registry.list(query.filter.as_deref())?)))
}

pub async fn workflow_form(
    State(state): State<SharedState>,
    _session: Session,
    Path(name): Path<String>,
) -> ApiResult<Json<Value>> {
    let def = state.services.registry.get(&name)?;
    Ok(Json(json!({
        "name": def.name,
        "description": def.description,
        "version": def.version(),
        "github_repo": def.github_repo,
        "container_image": def.container_image,
        "params": state.services.registry.render_param_form(&name)?,
    })))
}

#[derive(Deserialize)]
pub struct RunBody {
    #[serde(default)]
    version: Option<String>,
    input_selection: InputSelection,
    #[serde(default)]
    params: serde_json::Map<String, Value>,
    output_options: OutputOptions,
}

pub async fn start_run(
    State(state): State<SharedState>,
    Session(principal): Session,
    Path(name): Path<String>,
    body: JsonBody<RunBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    let request = RunRequest {
        workflow_name: name,
        version: body.version,
        input_selection: body.input_selection,
        params: body.params,
        output_options: body.output_options,
    };
    let run_uuid = state.services.analyzer.start_run(request, &principal)?;
    Ok((StatusCode::CREATED, Json(json!({ "run_uuid": run_uuid }))))
}

#[derive(Deserialize, Default)]
pub struct RunQuery {
    workflow: Option<String>,
    group: Option<String>,
    date: Option<String>,
}

pub async fn list_runs(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<RunQuery>,
) -> ApiResult<Json<Value>> {
    let Query(query) = query?;
    let filter = RunFilter {
        workflow: query.workflow.filter(|w| !w.is_empty()),
        group_id: run_scope(&state, &principal, query.group)?,
        user_id: None,
        date_range: date_range(&state, query.date.as_deref())?,
    };
    Ok(Json(json!(state.services.db.project_runs(&filter)?)))
}

pub async fn get_run(
    State(state): State<SharedState>,
    Session(principal): Session,
    Path(uuid): Path<String>,
) -> ApiResult<Json<Value>> {
    let db = &state.services.db;
    let run = db.run_projection(&uuid)?.ok_or_else(|| ApiError::new("UNKNOWN_RUN", format!("unknown run {uuid}")))?;
    if !principal.is_admin && run.group_id != principal.group_id {
        return Err(ApiError::forbidden_group(&run.group_id.to_string()));
    }
    Ok(Json(json!({ "run": run, "events": db.events_for_run(&uuid)? })))
}

// ---- analyzer config ------------------------------------------------------

fn analyzer_config_body(state: &SharedState) -> ApiResult<Value> {
    let registry = &state.services.registry;
    Ok(json!({
        "sections": registry.sections(),
        "ini": registry.to_ini(),
        "workflows": registry.list(None)?,
    }))
}

pub async fn get_analyzer_config(State(state): State<SharedState>, _admin: AdminSession) -> ApiResult<Json<Value>> {
    Ok(Json(analyzer_config_body(&state)?))
}

#[derive(Deserialize)]
pub struct AnalyzerConfigBody {
    #[serde(default)]
    sections: Option<ConfigSections>,
    #[serde(default)]
    ini: Option<String>,
}

pub async fn put_analyzer_config(
    State(state): State<SharedState>,
    _admin: AdminSession,
    body: JsonBody<AnalyzerConfigBody>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body?;
    let registry = &state.services.registry;
    match (body.sections, body.ini) {
        (Some(sections), None) => registry.replace_sections(sections)?,
        (None, Some(ini)) => registry.replace_from_ini(&ini)?,
        _ => return Err(ApiError::bad_request("send exactly one of sections or ini")),
    }
    Ok(Json(analyzer_config_body(&state)?))
}

// ---- repository -----------------------------------------------------------

#[derive(Deserialize, Default)]
pub struct ChildrenQuery {
    parent: Option<u64>,
}

pub async fn repo_children(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<ChildrenQuery>,
) -> ApiResult<Json<Vec<RepoObject>>> {
    let Query(query) = query?;
    let repo = &state.services.repo;
    if let Some(parent) = query.parent {
        visible(&principal, repo.get_object(parent)?)?;
    }
    let children =
        repo.list_children(query.parent)?.into_iter().filter(|o| principal.can_see_group(&o.group)).collect();
    Ok(Json(children))
}

#[derive(Deserialize)]
pub struct ObjectQuery {
    object: u64,
}

pub async fn repo_annotations(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<ObjectQuery>,
) -> ApiResult<Json<Value>> {
    let Query(query) = query?;
    let repo = &state.services.repo;
    let object = visible(&principal, repo.get_object(query.object)?)?;
    Ok(Json(json!({
        "object": object,
        "annotations": repo.get_annotations(query.object)?,
        "attachments": repo.attachments(query.object)?,
    })))
}

#[derive(Deserialize)]
pub struct SearchQuery {
    q: String,
}

pub async fn search(
    State(state): State<SharedState>,
    Session(principal): Session,
    query: QueryArgs<SearchQuery>,
) -> ApiResult<Json<Vec<RepoObject>>> {
    let Query(query) = query?;
    let hits = state
        .services
        .repo
        .search_by_value(&query.q)?
        .into_iter()
        .filter(|o| principal.can_see_group(&o.group))
        .collect();
    Ok(Json(hits))
}
