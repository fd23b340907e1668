//! HTTP/JSON triage service over a pipeline result tree.
//!
//! Reviewers list cases by uncertainty, inspect raster layers, and record
//! accept / override / reject decisions. Decisions are appended to a
//! newline-delimited JSON log (fsynced before the response); the effective
//! state of every case is the fold of that log, latest entry winning. The
//! service never writes to the result tree itself.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::future::Future;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use uqseg_core::analysis::{CaseRecord, DecisionState};
use uqseg_core::formats;
use uqseg_core::pipeline::{self, PipelineError};
use uqseg_core::{Raster, ValueKind};

pub const DEFAULT_DECISION_LOG: &str = "decisions.ndjson";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("cannot load results: {0}")]
    Results(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed decision: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    Override,
    Reject,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub case_id: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_mm: Option<f64>,
    #[serde(default)]
    pub note: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub reviewer: String,
}

impl Decision {
    pub fn state(&self) -> DecisionState {
        match self.action {
            Action::Accept => DecisionState::Accepted,
            Action::Reject => DecisionState::Rejected,
            Action::Override => DecisionState::Overridden {
                value_mm: self.value_mm.unwrap_or(f64::NAN),
                note: self.note.clone(),
            },
        }
    }

    fn same_request(&self, other: &Decision) -> bool {
        self.action == other.action && self.value_mm == other.value_mm && self.note == other.note && self.reviewer == other.reviewer
    }
}

/// Body of `POST /api/cases/{id}/decision`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    #[serde(default)]
    pub case_id: Option<String>,
    pub action: Action,
    #[serde(default)]
    pub value_mm: Option<f64>,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub reviewer: String,
    /// Server time when absent.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

impl DecisionRequest {
    pub fn validate(&self, case_id: &str) -> Result<(), String> {
        if let Some(id) = &self.case_id {
            if id != case_id {
                return Err(format!("body case_id {id:?} does not match URL case {case_id:?}"));
            }
        }
        match (self.action, self.value_mm) {
            (Action::Override, Some(v)) if v.is_finite() && v > 0.0 => Ok(()),
            (Action::Override, Some(v)) => Err(format!("override value_mm must be positive, got {v}")),
            (Action::Override, None) => Err("override requires value_mm".into()),
            (_, Some(_)) => Err("value_mm is only allowed with action override".into()),
            (_, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    Pending,
    Accepted,
    Overridden,
    Rejected,
}

impl StatusFilter {
    fn label(self) -> &'static str {
        match self {
            StatusFilter::Pending => "pending",
            StatusFilter::Accepted => "accepted",
            StatusFilter::Overridden => "overridden",
            StatusFilter::Rejected => "rejected",
        }
    }
}

/// Append-only decision log plus its replayed state.
#[derive(Debug)]
pub struct DecisionLog {
    path: PathBuf,
    file: File,
    entries: Vec<Decision>,
    active: HashMap<String, Decision>,
}

impl DecisionLog {
    /// Opens (creating if needed) and replays the log. A torn final line,
    /// left by a crash mid-append, is ignored and sealed with a newline so
    /// later appends stay whole lines.
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        let io = |source| ReviewError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw).map_err(io)?;
        let torn_tail = !raw.is_empty() && !raw.ends_with(b"\n");
        let mut entries = Vec::new();
        let lines: Vec<_> = BufReader::new(&raw[..]).lines().collect::<Result<_, _>>().map_err(io)?;
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Decision>(line) {
                Ok(d) => entries.push(d),
                Err(_) if torn_tail && i == last => {}
                Err(e) => {
                    return Err(ReviewError::CorruptLog {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: e.to_string(),
                    })
                }
            }
        }
        if torn_tail {
            file.seek(SeekFrom::End(0)).map_err(io)?;
            file.write_all(b"\n").and_then(|_| file.sync_data()).map_err(io)?;
        }
        let mut active = HashMap::new();
        for d in &entries {
            active.insert(d.case_id.clone(), d.clone());
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            entries,
            active,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one whole line and fsyncs before updating the in-memory state.
    pub fn append(&mut self, decision: Decision) -> Result<(), ReviewError> {
        let mut line = serde_json::to_vec(&decision).expect("decisions serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| ReviewError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.active.insert(decision.case_id.clone(), decision.clone());
        self.entries.push(decision);
        Ok(())
    }

    pub fn active(&self, case_id: &str) -> Option<&Decision> {
        self.active.get(case_id)
    }

    pub fn state(&self, case_id: &str) -> DecisionState {
        self.active(case_id).map_or(DecisionState::Pending, Decision::state)
    }

    /// All entries, timestamp order; ties keep log order.
    pub fn entries_by_time(&self) -> Vec<Decision> {
        let mut out = self.entries.clone();
        out.sort_by_key(|d| d.timestamp);
        out
    }
}

struct LoadedCase {
    dir: PathBuf,
    record: CaseRecord,
    /// `case.json` exactly as written by the pipeline.
    raw: Value,
}

pub struct AppState {
    cases: BTreeMap<String, LoadedCase>,
    log: Mutex<DecisionLog>,
}

impl AppState {
    pub fn load(results_dir: &Path, decision_log: &Path) -> Result<Self, ReviewError> {
        let mut cases = BTreeMap::new();
        for case in pipeline::load_results(results_dir)? {
            let path = case.dir.join(pipeline::CASE_RECORD);
            let bytes = fs::read(&path).map_err(|source| ReviewError::Io { path: path.clone(), source })?;
            let raw: Value = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Results(format!("{}: {e}", path.display())))?;
            cases.insert(
                case.record.case_id.clone(),
                LoadedCase {
                    dir: case.dir,
                    record: case.record,
                    raw,
                },
            );
        }
        Ok(Self {
            cases,
            log: Mutex::new(DecisionLog::open(decision_log)?),
        })
    }

    pub fn case_count(&self) -> usize {
        self.cases.len()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub modality: String,
    pub method: String,
    pub measurement_mm: Option<f64>,
    pub uncertainty_score: f64,
    pub ood_flag: bool,
    pub decision_status: &'static str,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

type Shared = Arc<AppState>;

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    sort: Option<String>,
    order: Option<String>,
    status: Option<String>,
}

fn parse_query_enum<T: for<'de> Deserialize<'de>>(name: &str, value: &str) -> Result<T, ApiError> {
    serde_json::from_value(Value::String(value.to_owned())).map_err(|_| bad_request(format!("unknown {name} {value:?}")))
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SortKey {
    Uncertainty,
    CaseId,
    Measurement,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SortOrder {
    Asc,
    Desc,
}

async fn list_cases(State(state): State<Shared>, Query(q): Query<ListQuery>) -> Result<Json<Vec<CaseSummary>>, ApiError> {
    let sort: SortKey = parse_query_enum("sort", q.sort.as_deref().unwrap_or("uncertainty"))?;
    let order: SortOrder = match &q.order {
        Some(o) => parse_query_enum("order", o)?,
        None if matches!(sort, SortKey::CaseId) => SortOrder::Asc,
        None => SortOrder::Desc,
    };
    let status: Option<StatusFilter> = q.status.as_deref().map(|s| parse_query_enum("status", s)).transpose()?;

    let log = state.log.lock().await;
    let mut rows: Vec<CaseSummary> = state
        .cases
        .values()
        .map(|c| {
            let r = &c.record;
            CaseSummary {
                case_id: r.case_id.clone(),
                modality: r.modality.to_string(),
                method: serde_json::to_value(r.method).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
                measurement_mm: r.measurement_mm(),
                uncertainty_score: r.uncertainty_score,
                ood_flag: r.ood_flag,
                decision_status: log.state(&r.case_id).label(),
            }
        })
        .filter(|row| status.is_none_or(|s| row.decision_status == s.label()))
        .collect();
    drop(log);

    // Ascending comparator; cases without a measurement sort last either way.
    rows.sort_by(|a, b| {
        let primary = match sort {
            SortKey::Uncertainty => a.uncertainty_score.total_cmp(&b.uncertainty_score),
            SortKey::CaseId => a.case_id.cmp(&b.case_id),
            SortKey::Measurement => match (a.measurement_mm, b.measurement_mm) {
                (Some(x), Some(y)) => {
                    let c = x.total_cmp(&y);
                    if matches!(order, SortOrder::Desc) {
                        c.reverse()
                    } else {
                        c
                    }
                }
                (Some(_), None) => return std::cmp::Ordering::Less,
                (None, Some(_)) => return std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            },
        };
        let primary = match (sort, order) {
            (SortKey::Measurement, _) | (_, SortOrder::Asc) => primary,
            (_, SortOrder::Desc) => primary.reverse(),
        };
        primary.then_with(|| a.case_id.cmp(&b.case_id))
    });
    Ok(Json(rows))
}

fn record_with_decision(case: &LoadedCase, log: &DecisionLog) -> Value {
    let mut record = case.raw.clone();
    let id = &case.record.case_id;
    if let Value::Object(map) = &mut record {
        map.insert("decision".into(), serde_json::to_value(log.state(id)).expect("state serializes"));
        map.insert("last_decision".into(), serde_json::to_value(log.active(id)).expect("decision serializes"));
    }
    record
}

async fn get_case(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let case = state.cases.get(&id).ok_or_else(|| not_found(format!("unknown case {id:?}")))?;
    let log = state.log.lock().await;
    Ok(Json(record_with_decision(case, &log)))
}

pub const LAYERS: [&str; 8] = ["image", "mask", "mean_prob", "total", "data", "model", "ekl", "variance"];

fn load_layer(case: &LoadedCase, name: &str) -> Result<Option<Raster>, String> {
    let files = &case.record.files;
    let at = |p: &PathBuf| case.dir.join(p);
    let result = match name {
        "image" => formats::load_image(&at(&files.image)).map(|(r, _)| r),
        "mask" => formats::load_mask(&at(&files.mask)).map(|m| m.to_raster()),
        "mean_prob" => formats::load_probmap(&at(&files.mean_prob)),
        "total" => formats::load_uqp(&at(&files.total), ValueKind::Uncertainty),
        "data" => formats::load_uqp(&at(&files.data), ValueKind::Uncertainty),
        "model" => formats::load_uqp(&at(&files.model), ValueKind::Uncertainty),
        "ekl" => formats::load_uqp(&at(&files.ekl), ValueKind::Uncertainty),
        "variance" => formats::load_uqp(&at(&files.variance), ValueKind::Uncertainty),
        _ => return Ok(None),
    };
    result.map(Some).map_err(|e| e.to_string())
}

async fn get_layer(
    State(state): State<Shared>,
    UrlPath((id, name)): UrlPath<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    let case = state.cases.get(&id).ok_or_else(|| not_found(format!("unknown case {id:?}")))?;
    let raster = load_layer(case, &name)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e))?
        .ok_or_else(|| not_found(format!("unknown layer {name:?}; expected one of {}", LAYERS.join(", "))))?;
    Ok(Json(json!({
        "width": raster.width(),
        "height": raster.height(),
        "values": raster.values(),
    })))
}

async fn post_decision(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let case = state.cases.get(&id).ok_or_else(|| not_found(format!("unknown case {id:?}")))?;
    let req: DecisionRequest = serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid decision: {e}")))?;
    req.validate(&id).map_err(bad_request)?;

    let mut log = state.log.lock().await;
    let candidate = Decision {
        case_id: id.clone(),
        action: req.action,
        value_mm: req.value_mm,
        note: req.note,
        timestamp: req.timestamp.unwrap_or_else(Utc::now),
        reviewer: req.reviewer,
    };
    let repeat = log
        .active(&id)
        .is_some_and(|d| d.same_request(&candidate) && req.timestamp.is_none_or(|t| t == d.timestamp));
    if !repeat {
        log.append(candidate).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    }
    Ok(Json(json!({
        "case_id": id,
        "decision_status": log.state(&id).label(),
        "decision": log.active(&id),
        "record": record_with_decision(case, &log),
    })))
}

async fn list_decisions(State(state): State<Shared>) -> Json<Vec<Decision>> {
    Json(state.log.lock().await.entries_by_time())
}

/// The API router, plus the static UI bundle at `/` when given.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/layers/{name}", get(get_layer))
        .route("/api/cases/{id}/decision", post(post_decision))
        .route("/api/decisions", get(list_decisions))
        .with_state(state);
    let app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub results_dir: PathBuf,
    pub decision_log: PathBuf,
    pub addr: SocketAddr,
    pub ui_dir: Option<PathBuf>,
}

/// A bound, loaded server that has not started answering yet.
pub struct Server {
    listener: tokio::net::TcpListener,
    app: Router,
    state: Arc<AppState>,
}

impl Server {
    pub async fn bind(config: &ServeConfig) -> Result<Self, ReviewError> {
        let state = Arc::new(AppState::load(&config.results_dir, &config.decision_log)?);
        let listener = tokio::net::TcpListener::bind(config.addr).await.map_err(|source| ReviewError::Bind {
            addr: config.addr,
            source,
        })?;
        let app = router(state.clone(), config.ui_dir.as_deref());
        Ok(Self { listener, app, state })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn case_count(&self) -> usize {
        self.state.case_count()
    }

    /// Serves until `shutdown` resolves; every accepted decision is already
    /// on disk, so stopping needs no extra flush.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        axum::serve(self.listener, self.app).with_graceful_shutdown(shutdown).await
    }
}
