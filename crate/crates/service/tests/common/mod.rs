#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use feb_core::emulator::{BoardType, Emulator, EmulatorHandle};
use feb_core::scenario::Scenario;
use feb_service::api::{self, AppState, ServiceConfig};
use feb_service::live::LiveDelta;
use serde_json::Value;
use tempfile::TempDir;

pub struct Service {
    pub base: String,
    pub app: Arc<AppState>,
    pub emulator: Option<EmulatorHandle>,
    pub dir: TempDir,
}

pub fn spawn_emulator(board: BoardType, scenario: &Scenario) -> EmulatorHandle {
    let emu = Emulator::new(board, scenario.seed.unwrap_or(0), scenario).unwrap();
    EmulatorHandle::spawn_udp(emu, "127.0.0.1:0").unwrap()
}

/// Starts the API against `endpoint` on an ephemeral port.
pub fn serve(endpoint: String, emulator: Option<EmulatorHandle>, tweak: impl FnOnce(&mut ServiceConfig)) -> Service {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(endpoint, dir.path());
    config.params.timeout_ms = 200;
    config.params.retries = 1;
    tweak(&mut config);
    let app = AppState::new(config).unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let served = app.clone();
    thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            api::serve(listener, served).await.unwrap();
        });
    });
    Service {
        base,
        app,
        emulator,
        dir,
    }
}

pub fn start(board: BoardType, scenario: &Scenario) -> Service {
    let emu = spawn_emulator(board, scenario);
    serve(emu.addr().to_string(), Some(emu), |_| {})
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .unwrap()
}

impl Service {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let r = client().get(self.url(path)).send().unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = client().post(self.url(path)).json(&body).send().unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }

    /// Polls `/runs/{id}` until the run leaves the running state.
    pub fn wait_run(&self, run_id: &str, limit: Duration) -> Value {
        let t0 = Instant::now();
        loop {
            let (code, body) = self.get(&format!("/runs/{run_id}"));
            assert_eq!(code, 200, "{body}");
            if body["state"] != "running" {
                return body;
            }
            assert!(t0.elapsed() < limit, "run {run_id} still running");
            thread::sleep(Duration::from_millis(50));
        }
    }
}

/// Reads `/live` events on a background thread.
pub struct LiveReader {
    pub events: mpsc::Receiver<(Instant, LiveDelta)>,
}

pub fn subscribe(url: String) -> LiveReader {
    let (tx, rx) = mpsc::channel();
    let (ready_tx, ready_rx) = mpsc::sync_channel(1);
    thread::spawn(move || {
        let client = reqwest::blocking::Client::builder().build().unwrap();
        let resp = client.get(url).send().unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let content_type = resp.headers()["content-type"].to_str().unwrap().to_string();
        assert!(content_type.starts_with("text/event-stream"), "{content_type}");
        let _ = ready_tx.send(());
        let mut reader = BufReader::new(resp);
        let mut line = String::new();
        let mut pending: Option<LiveDelta> = None;
        loop {
            line.clear();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let l = line.trim_end_matches(['\r', '\n']);
            if let Some(json) = l.strip_prefix("data: ") {
                pending = Some(serde_json::from_str(json).expect("event payload is a LiveDelta"));
            } else if l.is_empty() {
                // a blank line terminates the event
                if let Some(d) = pending.take() {
                    if tx.send((Instant::now(), d)).is_err() {
                        return;
                    }
                }
            }
        }
    });
    ready_rx.recv_timeout(Duration::from_secs(10)).expect("stream opened");
    LiveReader { events: rx }
}
