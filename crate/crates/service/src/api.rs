//! HTTP + server-sent-event API over one board.
//!
//! | route                      | purpose                                   |
//! |----------------------------|-------------------------------------------|
//! | `POST /runs`               | launch a test, returns `{run_id}`         |
//! | `GET /runs/{id}`           | run state, or the report once finished    |
//! | `GET /boards/{id}/reports` | run-log records of one board              |
//! | `GET /status`              | [`LiveStats`] snapshot                    |
//! | `GET /live`                | stream of [`LiveDelta`] events            |
//! | `POST /config`             | edit operating-config fields of one VMM   |
//! | `POST /control`            | start, stop, pulse, sigboard, reset       |
//!
//! Scans run on their own thread. While one is in progress, requests that
//! touch the board get 409; an unreachable board gives 503.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use feb_core::archive;
use feb_core::config::{self, VmmConfig, CHANNELS_PER_VMM};
use feb_core::crc::crc32;
use feb_core::link::{Link, LinkOptions};
use feb_core::scan::{BoardChannel, ScanError, ScanParams, Scanner, TestKind};
use feb_core::store::{RunRecord, Store, StoreError};
use futures::Stream;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use uuid::Uuid;

use crate::live::{Aggregator, DeltaTracker, LiveStats};
use crate::runner::{self, RunError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub endpoint: String,
    pub data_dir: PathBuf,
    /// Board id recorded for runs that do not name one.
    pub board_id: String,
    pub params: ScanParams,
    pub operating: VmmConfig,
    pub live_period: Duration,
}

impl ServiceConfig {
    pub fn new(endpoint: impl Into<String>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            endpoint: endpoint.into(),
            data_dir: data_dir.into(),
            board_id: "bench".into(),
            params: ScanParams::default(),
            operating: feb_core::scan::default_operating_config(),
            live_period: Duration::from_millis(100),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    run_id: Option<Uuid>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            run_id: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn busy(run_id: Option<Uuid>) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            message: "a scan is already in progress".into(),
            run_id,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<ScanError> for ApiError {
    fn from(e: ScanError) -> Self {
        let status = match &e {
            ScanError::Busy(_) => StatusCode::CONFLICT,
            ScanError::Timeout { .. } | ScanError::Link(_) => StatusCode::SERVICE_UNAVAILABLE,
            ScanError::InvalidParams(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::BAD_GATEWAY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message, "status": self.status.as_u16() });
        if let Some(id) = self.run_id {
            body["run_id"] = json!(id);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone)]
enum RunSlot {
    Running {
        test: TestKind,
        board_id: String,
        started: DateTime<Utc>,
    },
    Done(RunRecord),
    Failed {
        test: TestKind,
        board_id: String,
        error: String,
    },
}

pub struct AppState {
    config: ServiceConfig,
    live: Arc<Aggregator>,
    board: Mutex<Option<Scanner>>,
    connected: AtomicBool,
    active: Mutex<Option<Uuid>>,
    runs: Mutex<HashMap<Uuid, RunSlot>>,
    store: Mutex<Store>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn is_transport(e: &ScanError) -> bool {
    matches!(e, ScanError::Timeout { .. } | ScanError::Link(_))
}

impl AppState {
    /// Opens the run log and tries to reach the board. An unreachable board
    /// is not fatal; every later request retries.
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, StoreError> {
        let store = Store::open(&config.data_dir)?;
        let app = Arc::new(Self {
            config,
            live: Arc::new(Aggregator::new()),
            board: Mutex::new(None),
            connected: AtomicBool::new(false),
            active: Mutex::new(None),
            runs: Mutex::new(HashMap::new()),
            store: Mutex::new(store),
        });
        let mut guard = lock(&app.board);
        if let Err(e) = app.ensure_connected(&mut guard) {
            warn!("board at {} not reachable yet: {}", app.config.endpoint, e.message);
        }
        drop(guard);
        Ok(app)
    }

    pub fn live(&self) -> &Arc<Aggregator> {
        &self.live
    }

    fn ensure_connected<'a>(&self, slot: &'a mut Option<Scanner>) -> ApiResult<&'a mut Scanner> {
        if slot.is_none() {
            let options = LinkOptions {
                record_transcript: false,
                hit_tap: Some(self.live.tap()),
                ..LinkOptions::default()
            };
            let link = Link::udp(&self.config.endpoint, options)
                .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("board unreachable: {e}")))?;
            let scanner = Scanner::connect(link, self.config.params.clone(), self.config.operating.clone())
                .map_err(|e| {
                    let mut err = ApiError::from(e);
                    if err.status == StatusCode::SERVICE_UNAVAILABLE {
                        err.message = format!("board unreachable: {}", err.message);
                    }
                    err
                })?;
            info!("connected to {} board at {}", scanner.board().board_type.name(), self.config.endpoint);
            self.live.set_board(scanner.board());
            *slot = Some(scanner);
            self.connected.store(true, Ordering::Relaxed);
        }
        Ok(slot.as_mut().expect("connected above"))
    }

    fn disconnect(&self, slot: &mut Option<Scanner>) {
        *slot = None;
        self.connected.store(false, Ordering::Relaxed);
    }

    /// Board access for control requests; refuses while anything else
    /// holds the board.
    fn with_board<T>(&self, f: impl FnOnce(&mut Scanner) -> Result<T, ScanError>) -> ApiResult<T> {
        if let Some(id) = *lock(&self.active) {
            return Err(ApiError::busy(Some(id)));
        }
        let mut guard = match self.board.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(ApiError::busy(*lock(&self.active))),
        };
        let scanner = self.ensure_connected(&mut guard)?;
        match f(scanner) {
            Ok(v) => Ok(v),
            Err(e) => {
                if is_transport(&e) {
                    self.disconnect(&mut guard);
                }
                Err(e.into())
            }
        }
    }

    fn merged_params(&self, overrides: Option<Value>) -> ApiResult<ScanParams> {
        let Some(overrides) = overrides else {
            return Ok(self.config.params.clone());
        };
        let Value::Object(fields) = overrides else {
            return Err(ApiError::bad_request("params must be a JSON object"));
        };
        let mut merged = serde_json::to_value(&self.config.params).map_err(|e| ApiError::internal(e.to_string()))?;
        for (k, v) in fields {
            if merged.get(&k).is_none() {
                return Err(ApiError::bad_request(format!("unknown scan parameter `{k}`")));
            }
            merged[k] = v;
        }
        let params: ScanParams = serde_json::from_value(merged).map_err(|e| ApiError::bad_request(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    fn run_scan(
        self: Arc<Self>,
        run_id: Uuid,
        kind: TestKind,
        board_id: String,
        params: ScanParams,
        started: oneshot::Sender<ApiResult<()>>,
    ) {
        let mut guard = lock(&self.board);
        let scanner = match self.ensure_connected(&mut guard) {
            Ok(s) => s,
            Err(e) => {
                *lock(&self.active) = None;
                let _ = started.send(Err(e));
                return;
            }
        };
        if let Err(e) = scanner.set_params(params) {
            *lock(&self.active) = None;
            let _ = started.send(Err(e.into()));
            return;
        }
        lock(&self.runs).insert(
            run_id,
            RunSlot::Running {
                test: kind,
                board_id: board_id.clone(),
                started: Utc::now(),
            },
        );
        let _ = started.send(Ok(()));
        info!("run {run_id}: {} on {board_id}", kind.name());

        self.live.set_running(true);
        let result = runner::execute(scanner, kind, &board_id, run_id, &self.config.data_dir);
        self.live.set_running(false);
        let _ = scanner.set_params(self.config.params.clone());

        let slot = match result {
            Ok(done) => match lock(&self.store).append(done.record.clone()) {
                Ok(_) => RunSlot::Done(done.record),
                Err(e) => RunSlot::Failed {
                    test: kind,
                    board_id,
                    error: format!("run log: {e}"),
                },
            },
            Err(e) => {
                if let RunError::Scan(se) = &e {
                    if is_transport(se) {
                        self.disconnect(&mut guard);
                    }
                }
                warn!("run {run_id} failed: {e}");
                RunSlot::Failed {
                    test: kind,
                    board_id,
                    error: e.to_string(),
                }
            }
        };
        lock(&self.runs).insert(run_id, slot);
        drop(guard);
        *lock(&self.active) = None;
    }

    fn report_json(&self, record: &RunRecord) -> ApiResult<Value> {
        let name = record
            .files
            .iter()
            .find(|f| f.ends_with(".json"))
            .ok_or_else(|| ApiError::internal("run has no report file"))?;
        let report = archive::read_report(archive::resolve(&self.config.data_dir, name))
            .map_err(|e| ApiError::internal(format!("reading {name}: {e}")))?;
        let mut value = serde_json::to_value(report).map_err(|e| ApiError::internal(e.to_string()))?;
        value["state"] = json!("done");
        value["files"] = json!(record.files);
        Ok(value)
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(post_run))
        .route("/runs/{id}", get(get_run))
        .route("/boards/{id}/reports", get(board_reports))
        .route("/status", get(status))
        .route("/live", get(live))
        .route("/config", post(post_config))
        .route("/control", post(post_control))
        .with_state(app)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> io::Result<()> {
    axum::serve(listener, router(app)).await
}

#[derive(Debug, Deserialize)]
struct RunRequest {
    test: String,
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    board_id: Option<String>,
}

async fn post_run(State(app): State<Arc<AppState>>, Json(req): Json<RunRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    let kind: TestKind = req.test.parse().map_err(ApiError::bad_request)?;
    let params = app.merged_params(req.params)?;
    let board_id = req.board_id.unwrap_or_else(|| app.config.board_id.clone());
    if board_id.is_empty() || board_id.contains(['\n', '\r']) {
        return Err(ApiError::bad_request("board_id must be a non-empty single line"));
    }
    let run_id = Uuid::new_v4();
    {
        let mut active = lock(&app.active);
        if let Some(id) = *active {
            return Err(ApiError::busy(Some(id)));
        }
        *active = Some(run_id);
    }
    let (tx, rx) = oneshot::channel();
    let worker = app.clone();
    std::thread::Builder::new()
        .name(format!("feb-run-{run_id}"))
        .spawn(move || worker.run_scan(run_id, kind, board_id, params, tx))
        .map_err(|e| {
            *lock(&app.active) = None;
            ApiError::internal(format!("spawning scan thread: {e}"))
        })?;
    match rx.await {
        Ok(Ok(())) => Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id, "test": kind })))),
        Ok(Err(e)) => Err(e),
        Err(_) => Err(ApiError::internal("scan thread exited early")),
    }
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    let slot = lock(&app.runs).get(&id).cloned();
    let record = match slot {
        Some(RunSlot::Running { test, board_id, started }) => {
            return Ok(Json(json!({
                "run_id": id, "state": "running", "test": test, "board_id": board_id, "started": started,
            })))
        }
        Some(RunSlot::Failed { test, board_id, error }) => {
            return Ok(Json(json!({
                "run_id": id, "state": "failed", "test": test, "board_id": board_id, "error": error,
            })))
        }
        Some(RunSlot::Done(record)) => record,
        None => lock(&app.store)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no run {id}")))?,
    };
    tokio::task::spawn_blocking(move || app.report_json(&record))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
}

async fn board_reports(State(app): State<Arc<AppState>>, Path(board_id): Path<String>) -> Json<Vec<RunRecord>> {
    Json(lock(&app.store).query(&board_id))
}

#[derive(Debug, Default, Deserialize)]
struct Selection {
    vmm: Option<usize>,
    channel: Option<usize>,
}

impl Selection {
    fn channel(&self) -> ApiResult<BoardChannel> {
        let vmm = self.vmm.unwrap_or(0);
        let channel = self.channel.unwrap_or(0);
        if vmm >= 8 || channel >= CHANNELS_PER_VMM {
            return Err(ApiError::bad_request("vmm must be 0-7 and channel 0-63"));
        }
        Ok(BoardChannel::new(vmm, channel))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusBody {
    #[serde(flatten)]
    pub stats: LiveStats,
    pub board_connected: bool,
    pub scan_in_progress: Option<Uuid>,
}

async fn status(State(app): State<Arc<AppState>>, Query(sel): Query<Selection>) -> ApiResult<Json<StatusBody>> {
    let selected = sel.channel()?;
    Ok(Json(StatusBody {
        stats: app.live.snapshot(selected),
        board_connected: app.connected.load(Ordering::Relaxed),
        scan_in_progress: *lock(&app.active),
    }))
}

async fn live(
    State(app): State<Arc<AppState>>,
    Query(sel): Query<Selection>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let tracker = DeltaTracker::new(sel.channel()?);
    let mut ticker = tokio::time::interval(app.config.live_period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let stream = futures::stream::unfold((tracker, ticker, app), |(mut tracker, mut ticker, app)| async move {
        ticker.tick().await;
        let delta = tracker.next(&app.live);
        let event = Event::default().json_data(&delta).expect("delta serializes");
        Some((Ok(event), (tracker, ticker, app)))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct ConfigRequest {
    vmm: usize,
    fields: BTreeMap<String, u64>,
}

async fn post_config(State(app): State<Arc<AppState>>, Json(req): Json<ConfigRequest>) -> ApiResult<Json<Value>> {
    tokio::task::spawn_blocking(move || {
        let mut applied: Option<VmmConfig> = None;
        app.with_board(|scanner| {
            let mut cfg = scanner
                .operating_configs()
                .get(req.vmm)
                .cloned()
                .ok_or_else(|| ScanError::InvalidParams(format!("vmm {} out of range", req.vmm)))?;
            for (name, value) in &req.fields {
                config::set_field(&mut cfg, name, *value).map_err(|e| ScanError::InvalidParams(e.to_string()))?;
            }
            scanner.set_operating_config(req.vmm, cfg.clone())?;
            applied = Some(cfg);
            Ok(())
        })?;
        let cfg = applied.expect("set on success");
        let bits = config::encode(&cfg).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Json(json!({
            "vmm": req.vmm,
            "crc32": crc32(&bits),
            "fields": config::to_field_file(&cfg),
            "config": cfg,
        })))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
enum ControlRequest {
    Start,
    Stop,
    Pulse {
        count: u32,
        #[serde(default = "default_period")]
        period_us: u32,
    },
    Sigboard {
        mode: u8,
        #[serde(default)]
        amplitude: u16,
        #[serde(default)]
        seed: u32,
    },
    Reset,
}

fn default_period() -> u32 {
    10
}

async fn post_control(State(app): State<Arc<AppState>>, Json(req): Json<ControlRequest>) -> ApiResult<Json<Value>> {
    if let ControlRequest::Reset = req {
        app.live.reset();
        return Ok(Json(json!({ "ok": true, "action": "reset" })));
    }
    tokio::task::spawn_blocking(move || {
        let live = app.live.clone();
        app.with_board(|scanner| match req {
            ControlRequest::Start => {
                scanner.set_acquisition(true)?;
                live.set_running(true);
                Ok(())
            }
            ControlRequest::Stop => {
                scanner.set_acquisition(false)?;
                live.set_running(false);
                Ok(())
            }
            ControlRequest::Pulse { count, period_us } => {
                let per_pulse = 2 * scanner.board().n_channels as u64;
                scanner.trigger(count, period_us, per_pulse)
            }
            ControlRequest::Sigboard { mode, amplitude, seed } => scanner.configure_signal_board(mode, amplitude, seed),
            ControlRequest::Reset => unreachable!("handled above"),
        })?;
        let state = app.live.snapshot(BoardChannel::new(0, 0)).run_state;
        Ok(Json(json!({ "ok": true, "run_state": state })))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}
