//! Live operations service.
//!
//! A single engine thread owns the [`Session`] and is the only place the
//! simulation is touched. HTTP handlers talk to it through a request channel
//! and read a status snapshot published on a watch channel. Frames fan out to
//! stream clients over a broadcast channel; a client that falls behind loses
//! frames, the engine never waits for it.
//!
//! Routes:
//!
//! * `GET /state`: latest [`Status`] snapshot.
//! * `GET /stream`: server-sent events, one `frame` event per tick.
//! * `POST /command`: a [`CommandMessage`]; answers once the command has been
//!   applied at a tick boundary.
//! * `GET /history?from=&to=`: retained frames with `from <= tick < to`.
//! * `GET /log`: commands applied so far, in replay form.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc as std_mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot, watch};

use fhrctl_core::ops::{Ack, CommandMessage, History, LoggedCommand, Rejection, Session, TelemetryFrame};
use fhrctl_core::scenario::LogWriter;

/// Largest number of frames one history request returns.
pub const HISTORY_LIMIT: usize = 20_000;

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Hold each tick to `dt / speed` of wall-clock time. Off runs flat out.
    pub paced: bool,
    pub start_paused: bool,
    pub history: usize,
    /// Per-client frame backlog before frames are dropped.
    pub stream_buffer: usize,
    /// Write the tick log here as the run progresses.
    pub log_path: Option<PathBuf>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            paced: true,
            start_paused: false,
            history: 10_000,
            stream_buffer: 256,
            log_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub tick: u64,
    pub t: f64,
    pub paused: bool,
    pub finished: bool,
    pub speed: f64,
    pub governor_available: bool,
    /// Set when the simulation stopped on an error; commands are refused.
    pub fault: Option<String>,
    pub frame: Option<TelemetryFrame>,
}

#[derive(Debug)]
pub enum Reply {
    Applied(Ack),
    Rejected(Rejection),
    Fault(String),
}

enum Request {
    Submit(CommandMessage, oneshot::Sender<Reply>),
    History(u64, u64, oneshot::Sender<Vec<TelemetryFrame>>),
    Log(oneshot::Sender<Vec<LoggedCommand>>),
    Shutdown,
}

/// Handle shared by the HTTP handlers.
#[derive(Clone)]
pub struct AppState {
    requests: std_mpsc::Sender<Request>,
    status: watch::Receiver<Status>,
    frames: broadcast::Sender<TelemetryFrame>,
}

impl AppState {
    pub fn status(&self) -> Status {
        self.status.borrow().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<TelemetryFrame> {
        self.frames.subscribe()
    }

    /// Queue a command and wait for the tick boundary that applies it.
    pub async fn submit(&self, cmd: CommandMessage) -> Reply {
        let (tx, rx) = oneshot::channel();
        if self.requests.send(Request::Submit(cmd, tx)).is_err() {
            return Reply::Fault("engine stopped".into());
        }
        rx.await.unwrap_or_else(|_| Reply::Fault("engine stopped".into()))
    }

    pub async fn history(&self, from: u64, to: u64) -> Vec<TelemetryFrame> {
        let (tx, rx) = oneshot::channel();
        if self.requests.send(Request::History(from, to, tx)).is_err() {
            return Vec::new();
        }
        rx.await.unwrap_or_default()
    }

    pub async fn command_log(&self) -> Vec<LoggedCommand> {
        let (tx, rx) = oneshot::channel();
        if self.requests.send(Request::Log(tx)).is_err() {
            return Vec::new();
        }
        rx.await.unwrap_or_default()
    }

    /// Wait until the status satisfies `pred`.
    pub async fn wait_for(&self, pred: impl Fn(&Status) -> bool) -> Status {
        let mut rx = self.status.clone();
        let found = rx.wait_for(|s| pred(s)).await.map(|s| s.clone());
        found.unwrap_or_else(|_| self.status())
    }
}

/// Running engine thread.
pub struct Engine {
    state: AppState,
    handle: Option<JoinHandle<()>>,
}

impl Engine {
    pub fn start(session: Session, opts: EngineOptions) -> std::io::Result<Self> {
        let session = if opts.start_paused { session.start_paused() } else { session };
        let (req_tx, req_rx) = std_mpsc::channel();
        let (status_tx, status_rx) = watch::channel(status_of(&session, None));
        let (frame_tx, _) = broadcast::channel(opts.stream_buffer.max(1));
        let writer = match &opts.log_path {
            Some(p) => Some(
                LogWriter::create(p, &session.sim().columns())
                    .map_err(|e| std::io::Error::other(e.to_string()))?,
            ),
            None => None,
        };
        let runner = Runner {
            session,
            history: History::new(opts.history),
            waiting: Vec::new(),
            fault: None,
            status: status_tx,
            frames: frame_tx.clone(),
            writer,
            paced: opts.paced,
        };
        let handle = std::thread::Builder::new()
            .name("engine".into())
            .spawn(move || runner.run(req_rx))?;
        Ok(Self {
            state: AppState {
                requests: req_tx,
                status: status_rx,
                frames: frame_tx,
            },
            handle: Some(handle),
        })
    }

    pub fn state(&self) -> AppState {
        self.state.clone()
    }

    pub fn router(&self) -> Router {
        router(self.state())
    }

    /// Stop the engine thread and flush the tick log.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.state.requests.send(Request::Shutdown);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.stop();
    }
}

fn status_of(s: &Session, fault: Option<String>) -> Status {
    let sim = s.sim();
    Status {
        tick: sim.tick_index(),
        t: sim.time(),
        paused: s.paused(),
        finished: s.finished(),
        speed: s.speed(),
        governor_available: sim.has_governor(),
        fault,
        frame: s.last_frame().cloned(),
    }
}

struct Runner {
    session: Session,
    history: History,
    waiting: Vec<(u64, oneshot::Sender<Reply>)>,
    fault: Option<String>,
    status: watch::Sender<Status>,
    frames: broadcast::Sender<TelemetryFrame>,
    writer: Option<LogWriter>,
    paced: bool,
}

impl Runner {
    fn run(mut self, rx: std_mpsc::Receiver<Request>) {
        let mut deadline = Instant::now();
        'outer: loop {
            loop {
                match rx.try_recv() {
                    Ok(r) => {
                        if !self.handle(r) {
                            break 'outer;
                        }
                    }
                    Err(std_mpsc::TryRecvError::Empty) => break,
                    Err(std_mpsc::TryRecvError::Disconnected) => break 'outer,
                }
            }
            let ticked = self.step();
            let idle = self.fault.is_some() || self.session.paused() || self.session.finished();
            if idle && !self.session.has_pending() {
                match rx.recv() {
                    Ok(r) => {
                        if !self.handle(r) {
                            break;
                        }
                    }
                    Err(_) => break,
                }
                deadline = Instant::now();
                continue;
            }
            if self.paced && ticked {
                let dt = self.session.sim().config().dt / self.session.speed();
                deadline += Duration::from_secs_f64(dt);
                let now = Instant::now();
                // After a stall, restart the clock rather than burst.
                if now > deadline + Duration::from_secs(1) {
                    deadline = now;
                }
                while let Some(left) = deadline.checked_duration_since(Instant::now()) {
                    match rx.recv_timeout(left) {
                        Ok(r) => {
                            if !self.handle(r) {
                                break 'outer;
                            }
                        }
                        Err(std_mpsc::RecvTimeoutError::Timeout) => break,
                        Err(std_mpsc::RecvTimeoutError::Disconnected) => break 'outer,
                    }
                }
            }
        }
        if let Some(w) = self.writer.take() {
            if let Err(e) = w.finish() {
                log::error!("tick log: {e}");
            }
        }
    }

    /// Returns false on shutdown.
    fn handle(&mut self, req: Request) -> bool {
        match req {
            Request::Submit(cmd, reply) => {
                if let Some(f) = &self.fault {
                    let _ = reply.send(Reply::Fault(f.clone()));
                    return true;
                }
                let seq = cmd.seq;
                match self.session.submit(cmd) {
                    Ok(_) => self.waiting.push((seq, reply)),
                    Err(r) => {
                        let _ = reply.send(Reply::Rejected(r));
                    }
                }
            }
            Request::History(from, to, reply) => {
                let mut frames = self.history.range(from, to);
                frames.truncate(HISTORY_LIMIT);
                let _ = reply.send(frames);
            }
            Request::Log(reply) => {
                let _ = reply.send(self.session.command_log().to_vec());
            }
            Request::Shutdown => return false,
        }
        true
    }

    /// Apply pending commands and advance one tick if running.
    fn step(&mut self) -> bool {
        if self.fault.is_some() {
            return false;
        }
        let (acks, rec) = match self.session.step() {
            Ok(out) => out,
            Err(e) => {
                log::error!("simulation fault at tick {}: {e}", self.session.sim().tick_index());
                self.fault = Some(e.to_string());
                for (_, reply) in self.waiting.drain(..) {
                    let _ = reply.send(Reply::Fault(e.to_string()));
                }
                self.publish();
                return false;
            }
        };
        for ack in acks {
            if let Some(i) = self.waiting.iter().position(|(s, _)| *s == ack.seq) {
                let (_, reply) = self.waiting.swap_remove(i);
                let _ = reply.send(Reply::Applied(ack));
            }
        }
        let ticked = rec.is_some();
        if let Some(rec) = rec {
            if let Some(w) = &self.writer {
                let cfg = self.session.sim().config();
                let mut row = vec![rec.tick as f64 * cfg.dt];
                row.extend(rec.row(cfg.plant.anchors.q_rx_mw));
                w.send(row);
            }
            if let Some(frame) = self.session.last_frame() {
                self.history.push(frame.clone());
                // No receivers is fine.
                let _ = self.frames.send(frame.clone());
            }
        }
        self.publish();
        ticked
    }

    fn publish(&self) {
        self.status.send_replace(status_of(&self.session, self.fault.clone()));
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/stream", get(stream))
        .route("/command", post(command))
        .route("/history", get(history))
        .route("/log", get(command_log))
        .with_state(state)
}

/// Bind `addr` and serve until `shutdown` resolves.
pub async fn serve(
    engine: &Engine,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, engine.router())
        .with_graceful_shutdown(shutdown)
        .await
}

async fn get_state(State(s): State<AppState>) -> Json<Status> {
    Json(s.status())
}

async fn stream(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.subscribe();
    let frames = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(f) => {
                    let ev = Event::default()
                        .event("frame")
                        .id(f.tick.to_string())
                        .json_data(&f)
                        .unwrap_or_else(|_| Event::default().comment("unserializable frame"));
                    return Some((Ok(ev), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::debug!("stream client dropped {n} frames");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(frames).keep_alive(KeepAlive::default())
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    last_seq: Option<u64>,
}

fn error(code: StatusCode, msg: String, last_seq: Option<u64>) -> Response {
    (code, Json(ErrorBody { error: msg, last_seq })).into_response()
}

async fn command(State(s): State<AppState>, body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return error(StatusCode::BAD_REQUEST, "body is not UTF-8".into(), None),
    };
    let cmd = match CommandMessage::from_json(text) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string(), None),
    };
    match s.submit(cmd).await {
        Reply::Applied(ack) if ack.accepted => (StatusCode::OK, Json(ack)).into_response(),
        Reply::Applied(ack) => (StatusCode::BAD_REQUEST, Json(ack)).into_response(),
        Reply::Rejected(r @ Rejection::Invalid(_)) => error(StatusCode::BAD_REQUEST, r.to_string(), None),
        Reply::Rejected(r @ Rejection::Stale { last }) => error(StatusCode::CONFLICT, r.to_string(), Some(last)),
        Reply::Fault(f) => error(StatusCode::CONFLICT, format!("simulation fault: {f}"), None),
    }
}

#[derive(Debug, Deserialize)]
struct Range {
    from: Option<u64>,
    to: Option<u64>,
}

async fn history(State(s): State<AppState>, Query(r): Query<Range>) -> Json<Vec<TelemetryFrame>> {
    Json(s.history(r.from.unwrap_or(0), r.to.unwrap_or(u64::MAX)).await)
}

async fn command_log(State(s): State<AppState>) -> Json<Vec<LoggedCommand>> {
    Json(s.command_log().await)
}
