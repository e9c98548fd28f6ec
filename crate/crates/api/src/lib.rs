//! HTTP/JSON front end over [`fairflow::Services`].
//!
//! Every route except `POST /api/session` and `GET /api/routes` needs an
//! `Authorization: Bearer <token>` header naming an entry of `api.tokens`.

mod error;
mod handlers;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::request::Parts;
use axum::routing::{get, post};
use axum::Router;
use fairflow::{Principal, Services};
use serde::Serialize;

pub use error::ApiError;

/// One row of the route table served at `/api/routes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RouteInfo {
    pub method: &'static str,
    pub path: &'static str,
    pub admin_only: bool,
    pub summary: &'static str,
}

const fn route(method: &'static str, path: &'static str, admin_only: bool, summary: &'static str) -> RouteInfo {
    RouteInfo { method, path, admin_only, summary }
}

pub const ROUTES: &[RouteInfo] = &[
    route("POST", "/api/session", false, "resolve a token to its session"),
    route("GET", "/api/routes", false, "this table"),
    route("POST", "/api/orders", false, "queue an import order"),
    route("GET", "/api/orders", false, "list orders (status, group, date)"),
    route("GET", "/api/orders/monitor", false, "import monitor rows (date, group)"),
    route("GET", "/api/admin/mappings", true, "list group folder mappings"),
    route("POST", "/api/admin/mappings", true, "add or change a mapping"),
    route("DELETE", "/api/admin/mappings", true, "remove a mapping (group)"),
    route("GET", "/api/remote", false, "browse the group's remote folder (path)"),
    route("GET", "/api/forms/templates", false, "list form templates"),
    route("POST", "/api/forms/templates", true, "publish a new template version"),
    route("POST", "/api/forms/submissions", false, "submit a form for an object"),
    route("GET", "/api/forms/history", false, "submissions for an object and form (object, form)"),
    route("GET", "/api/workflows", false, "list workflows (filter)"),
    route("GET", "/api/workflows/{name}/form", false, "parameter form of a workflow"),
    route("POST", "/api/workflows/{name}/runs", false, "start a workflow run"),
    route("GET", "/api/runs", false, "run status rows (workflow, group, date)"),
    route("GET", "/api/runs/{uuid}", false, "one run with its events"),
    route("GET", "/api/admin/analyzer-config", true, "workflow registry sections"),
    route("PUT", "/api/admin/analyzer-config", true, "replace workflow registry sections"),
    route("GET", "/api/repo/children", false, "browse repository objects (parent)"),
    route("GET", "/api/repo/annotations", false, "key-value blocks of an object (object)"),
    route("GET", "/api/search", false, "objects matching a value or name (q)"),
];

pub struct AppState {
    pub services: Services,
    tokens: HashMap<String, Principal>,
}

impl AppState {
    pub fn new(services: Services) -> Self {
        let tokens = services.config.api.tokens.iter().map(|t| (t.token.clone(), t.principal.clone())).collect();
        AppState { services, tokens }
    }

    pub fn principal(&self, token: &str) -> Option<&Principal> {
        self.tokens.get(token)
    }

    /// Group id for a group name as known from the token table; numeric input is taken as an id.
    fn group_id(&self, group: &str) -> Option<i64> {
        group
            .parse()
            .ok()
            .or_else(|| self.tokens.values().find(|p| p.group == group).map(|p| p.group_id))
    }
}

pub type SharedState = Arc<AppState>;

/// The authenticated caller.
#[derive(Debug, Clone)]
pub struct Session(pub Principal);

impl FromRequestParts<SharedState> for Session {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &SharedState) -> Result<Self, Self::Rejection> {
        let header = parts
            .headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(ApiError::unauthorized)?;
        state.principal(header.trim()).cloned().map(Session).ok_or_else(ApiError::unauthorized)
    }
}

/// A session that must belong to an admin.
#[derive(Debug, Clone)]
pub struct AdminSession(pub Principal);

impl FromRequestParts<SharedState> for AdminSession {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &SharedState) -> Result<Self, Self::Rejection> {
        let Session(principal) = Session::from_request_parts(parts, state).await?;
        if !principal.is_admin {
            return Err(ApiError::not_admin(&principal.username));
        }
        Ok(AdminSession(principal))
    }
}

pub fn router(state: SharedState) -> Router {
    use handlers::*;
    let mut app = Router::new()
        .route("/api/session", post(session))
        .route("/api/routes", get(routes))
        .route("/api/orders", post(create_order).get(list_orders))
        .route("/api/orders/monitor", get(monitor_orders))
        .route("/api/admin/mappings", get(list_mappings).post(upsert_mapping).delete(delete_mapping))
        .route("/api/remote", get(browse_remote))
        .route("/api/forms/templates", get(list_templates).post(publish_template))
        .route("/api/forms/submissions", post(submit_form))
        .route("/api/forms/history", get(form_history))
        .route("/api/workflows", get(list_workflows))
        .route("/api/workflows/{name}/form", get(workflow_form))
        .route("/api/workflows/{name}/runs", post(start_run))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{uuid}", get(get_run))
        .route("/api/admin/analyzer-config", get(get_analyzer_config).put(put_analyzer_config))
        .route("/api/repo/children", get(repo_children))
        .route("/api/repo/annotations", get(repo_annotations))
        .route("/api/search", get(search));
    if let Some(dir) = state.services.config.api.ui_dir.clone() {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.with_state(state)
}

/// Runs the importer daemon, the analyzer ticker and the HTTP listener until Ctrl-C.
pub async fn serve(services: Services) -> Result<(), ApiError> {
    let addr: SocketAddr = services
        .config
        .api
        .bind_addr
        .parse()
        .map_err(|e| ApiError::fatal_config(format!("api.bind_addr: {e}")))?;
    let daemon = fairflow::importer::run_daemon(services.importer.clone())
        .map_err(|e| ApiError::fatal_config(e.to_string()))?;
    let ticker = fairflow::analyzer::Ticker::start(services.analyzer.clone());
    let listener =
        tokio::net::TcpListener::bind(addr).await.map_err(|e| ApiError::fatal_config(format!("bind {addr}: {e}")))?;
    tracing::info!(%addr, "listening");
    let app = router(Arc::new(AppState::new(services)));
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    ticker.stop();
    daemon.shutdown();
    result.map_err(|e| ApiError::fatal_config(e.to_string()))
}
