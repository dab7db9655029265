//! HTTP service under `/v1` for driving interactive analyses against a
//! simulated fleet.
//!
//! Only aggregate, published quantities are ever serialised: debiased
//! histograms, certified bounds, budget roll-ups. Per-device reports,
//! shares and sub-threshold sums never reach a response body.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use fedstats::engine::synthetic::SimulationConfig;
use fedstats::engine::{
    BudgetRollup, DiscoveryPlan, DiscoveryState, DiscoveryStatus, Engine, EngineError, Fleet, RoundOutcome,
    RoundResult,
};
use fedstats::recipe::{check_query_class, Recipe, RecipeDoc};

/// Service-wide limits every analysis plan is validated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    pub max_total_epsilon: f64,
    pub max_total_delta: f64,
    pub max_devices: usize,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    #[serde(default)]
    pub token: Option<String>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            max_total_epsilon: 10.0,
            max_total_delta: 1e-5,
            max_devices: 1_000_000,
            token: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    RoundRunning,
    Gated,
    Exhausted,
    Done,
}

/// Machine-readable error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            error: code.to_string(),
            detail: detail.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedAnalysis {
    pub analysis_id: String,
    pub status: SessionStatus,
    pub devices: u64,
}

/// Body of `POST /v1/analyses/{id}/rounds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoundRequest {
    /// Let the engine extend the current frequent prefixes.
    AutoExtend,
    Recipe { recipe: serde_json::Value },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTicket {
    pub token: String,
    pub recipe_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RoundView {
    Pending,
    /// Below the cohort threshold: only the threshold is disclosed.
    Gated { min_cohort: u64, detail: String },
    Published { result: Box<RoundResult> },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanUsage {
    pub total_epsilon: f64,
    pub used_epsilon: f64,
    pub total_delta: f64,
    pub used_delta: f64,
    pub rounds_published: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub analysis_id: String,
    pub plan: PlanUsage,
    pub fleet: Option<BudgetRollup>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateView {
    pub analysis_id: String,
    pub status: SessionStatus,
    pub plan: DiscoveryPlan,
    pub discovery: DiscoveryState,
}

struct Sim {
    engine: Engine,
    fleet: Fleet,
    state: DiscoveryState,
}

struct Meta {
    status: SessionStatus,
    rounds: Vec<(String, RoundView)>,
    budget: BudgetSummary,
    state: DiscoveryState,
}

struct Session {
    plan: DiscoveryPlan,
    sim: Arc<Mutex<Sim>>,
    meta: Mutex<Meta>,
}

#[derive(Default)]
pub struct AppState {
    config: ApiConfig,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(config: ApiConfig) -> Self {
        Self {
            config,
            sessions: Mutex::new(BTreeMap::new()),
        }
    }
}

/// The `/v1` router.
pub fn router(config: ApiConfig) -> Router {
    let state = Arc::new(AppState::new(config));
    Router::new()
        .route("/v1/analyses", post(create_analysis))
        .route("/v1/analyses/{id}/rounds", post(submit_round))
        .route("/v1/analyses/{id}/rounds/{token}", get(get_round))
        .route("/v1/analyses/{id}/budget", get(get_budget))
        .route("/v1/analyses/{id}/state", get(get_state))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Binds and serves until the process ends.
pub async fn serve(config: ApiConfig, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(config)).await
}

async fn require_token(State(app): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.config.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

fn session(app: &AppState, id: &str) -> ApiResult<Arc<Session>> {
    app.sessions
        .lock()
        .expect("session map")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_analysis", id.to_string()))
}

fn budget_summary(plan: &DiscoveryPlan, sim: &Sim) -> BudgetSummary {
    let (used_epsilon, used_delta) = sim.state.ledger.basic();
    BudgetSummary {
        analysis_id: plan.analysis_id.clone(),
        plan: PlanUsage {
            total_epsilon: plan.total_epsilon,
            used_epsilon,
            total_delta: plan.total_delta,
            used_delta,
            rounds_published: sim.state.ledger.len(),
        },
        fleet: sim.fleet.budget_rollup(&plan.analysis_id),
    }
}

async fn create_analysis(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<CreatedAnalysis>)> {
    let cfg: SimulationConfig = parse_json(&body)?;
    let plan = cfg.plan.clone();
    plan.validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_plan", e.to_string()))?;
    if plan.total_epsilon > app.config.max_total_epsilon || plan.total_delta > app.config.max_total_delta {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "plan_exceeds_limits",
            format!(
                "plan ({}, {}) exceeds service limits ({}, {})",
                plan.total_epsilon, plan.total_delta, app.config.max_total_epsilon, app.config.max_total_delta
            ),
        ));
    }
    if cfg.fleet.devices > app.config.max_devices {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "fleet_too_large",
            format!("{} devices > {}", cfg.fleet.devices, app.config.max_devices),
        ));
    }
    let id = plan.analysis_id.clone();
    if app.sessions.lock().expect("session map").contains_key(&id) {
        return Err(ApiError::new(StatusCode::CONFLICT, "analysis_exists", id));
    }
    let built = tokio::task::spawn_blocking(move || {
        cfg.build().map(|(engine, fleet, _)| Sim {
            engine,
            fleet,
            state: DiscoveryState::new(&cfg.plan.analysis_id),
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_plan", e.to_string()))?;
    let devices = built.fleet.len() as u64;
    let meta = Meta {
        status: SessionStatus::Idle,
        rounds: Vec::new(),
        budget: budget_summary(&plan, &built),
        state: built.state.clone(),
    };
    let session = Arc::new(Session {
        plan,
        sim: Arc::new(Mutex::new(built)),
        meta: Mutex::new(meta),
    });
    let mut sessions = app.sessions.lock().expect("session map");
    if sessions.contains_key(&id) {
        return Err(ApiError::new(StatusCode::CONFLICT, "analysis_exists", id));
    }
    sessions.insert(id.clone(), session);
    Ok((
        StatusCode::CREATED,
        Json(CreatedAnalysis {
            analysis_id: id,
            status: SessionStatus::Idle,
            devices,
        }),
    ))
}

fn plan_error(meta: &mut Meta, e: EngineError) -> ApiError {
    match e {
        EngineError::PlanExceeded(detail) => {
            meta.status = SessionStatus::Exhausted;
            ApiError::new(StatusCode::FORBIDDEN, "plan_exceeded", detail)
        }
        other => ApiError::new(StatusCode::BAD_REQUEST, "invalid_round", other.to_string()),
    }
}

async fn submit_round(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<RoundTicket>)> {
    let req: RoundRequest = parse_json(&body)?;
    let s = session(&app, &id)?;
    let mut meta = s.meta.lock().expect("session meta");
    match meta.status {
        SessionStatus::RoundRunning => {
            return Err(ApiError::new(StatusCode::CONFLICT, "round_running", "a round is already running"));
        }
        SessionStatus::Exhausted | SessionStatus::Done => {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "plan_exceeded",
                format!("analysis is {:?}", meta.status),
            ));
        }
        SessionStatus::Idle | SessionStatus::Gated => {}
    }
    // no round is running, so the simulation lock is free
    let (recipe, auto) = {
        let sim = s.sim.lock().expect("simulation");
        match req {
            RoundRequest::AutoExtend => match sim.state.next_recipe(&s.plan) {
                Ok(Some(r)) => (r, true),
                Ok(None) => {
                    if sim.state.status == DiscoveryStatus::Gated {
                        return Err(ApiError::new(
                            StatusCode::FORBIDDEN,
                            "discovery_gated",
                            "the last discovery round was gated",
                        ));
                    }
                    meta.status = SessionStatus::Done;
                    return Err(ApiError::new(StatusCode::FORBIDDEN, "plan_exceeded", "discovery is complete"));
                }
                Err(e) => return Err(plan_error(&mut meta, e)),
            },
            RoundRequest::Recipe { recipe } => {
                let doc: RecipeDoc = serde_json::from_value(recipe)
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_recipe", e.to_string()))?;
                let r = Recipe::from_doc(doc)
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_recipe", e.to_string()))?;
                if r.analysis_id() != s.plan.analysis_id {
                    return Err(ApiError::new(
                        StatusCode::BAD_REQUEST,
                        "malformed_recipe",
                        format!("recipe belongs to {}", r.analysis_id()),
                    ));
                }
                if !sim.state.admits(&s.plan, &r) {
                    return Err(ApiError::new(
                        StatusCode::FORBIDDEN,
                        "plan_exceeded",
                        "recipe budget exceeds what remains of the plan",
                    ));
                }
                if let Err(denial) = check_query_class(&r, &sim.engine.trust().query_classes()) {
                    let code = serde_json::to_value(&denial)
                        .ok()
                        .and_then(|v| v.get("reason").and_then(|c| c.as_str()).map(String::from))
                        .unwrap_or_else(|| "query_class".into());
                    return Err(ApiError::new(StatusCode::FORBIDDEN, &code, denial.to_string()));
                }
                (r, false)
            }
        }
    };
    let token = format!("round-{}", meta.rounds.len() + 1);
    meta.rounds.push((token.clone(), RoundView::Pending));
    meta.status = SessionStatus::RoundRunning;
    drop(meta);

    let ticket = RoundTicket {
        token: token.clone(),
        recipe_id: recipe.recipe_id().to_string(),
    };
    let worker = s.clone();
    tokio::task::spawn_blocking(move || run_round(&worker, &recipe, auto, &token));
    Ok((StatusCode::ACCEPTED, Json(ticket)))
}

fn run_round(s: &Session, recipe: &Recipe, auto: bool, token: &str) {
    let mut sim = s.sim.lock().expect("simulation");
    let Sim { engine, fleet, state } = &mut *sim;
    let result = engine.run_round(recipe, fleet).and_then(|outcome| {
        if auto {
            state.record_round(recipe, &s.plan, outcome.clone())?;
        } else {
            state.record_custom(recipe, outcome.clone())?;
        }
        Ok(outcome)
    });
    let budget = budget_summary(&s.plan, &sim);
    let snapshot = sim.state.clone();
    drop(sim);

    let mut meta = s.meta.lock().expect("session meta");
    let (view, status) = match result {
        Ok(RoundOutcome::Gated { min_cohort, .. }) => (
            RoundView::Gated {
                min_cohort,
                detail: "insufficient".into(),
            },
            SessionStatus::Gated,
        ),
        Ok(RoundOutcome::Published(r)) => {
            let status = match snapshot.status {
                DiscoveryStatus::Done => SessionStatus::Done,
                DiscoveryStatus::Exhausted => SessionStatus::Exhausted,
                _ => SessionStatus::Idle,
            };
            (RoundView::Published { result: r }, status)
        }
        Err(e) => (RoundView::Failed { error: e.to_string() }, SessionStatus::Idle),
    };
    if let Some(slot) = meta.rounds.iter_mut().find(|(t, _)| t == token) {
        slot.1 = view;
    }
    meta.status = status;
    meta.budget = budget;
    meta.state = snapshot;
}

async fn get_round(
    State(app): State<Arc<AppState>>,
    Path((id, token)): Path<(String, String)>,
) -> ApiResult<Json<RoundView>> {
    let s = session(&app, &id)?;
    let meta = s.meta.lock().expect("session meta");
    meta.rounds
        .iter()
        .find(|(t, _)| *t == token)
        .map(|(_, v)| Json(v.clone()))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_round", token))
}

async fn get_budget(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<BudgetSummary>> {
    let s = session(&app, &id)?;
    let meta = s.meta.lock().expect("session meta");
    Ok(Json(meta.budget.clone()))
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StateView>> {
    let s = session(&app, &id)?;
    let meta = s.meta.lock().expect("session meta");
    Ok(Json(StateView {
        analysis_id: id,
        status: meta.status,
        plan: s.plan.clone(),
        discovery: meta.state.clone(),
    }))
}
