//! Hub server: WebSocket and line-delimited TCP sessions, device callbacks,
//! and the tick thread.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use tracing::{debug, info, warn};
use xri_core::device::{DeviceDescriptor, DeviceEvent, DeviceTransport, HttpReply, DeviceRequest};
use xri_core::model::Timestamp;
use xri_core::script::{Action, DemoScript};
use xri_core::wire::{encode_frame, CoherencePayload, Frame, HubBackend, Payload, SessionHub, SessionId};
use xri_core::world::{DeviceAccess, World};

use crate::emulators::{Clock, Emulators};

pub struct Hub {
    pub world: World,
    pub sessions: SessionHub,
    outboxes: BTreeMap<SessionId, UnboundedSender<String>>,
}

pub type SharedHub = Arc<Mutex<Hub>>;

impl Hub {
    pub fn new(world: World) -> Self {
        Self {
            world,
            sessions: SessionHub::new(),
            outboxes: BTreeMap::new(),
        }
    }

    fn send(&self, frames: Vec<(SessionId, Frame)>) {
        for (id, frame) in frames {
            let Some(tx) = self.outboxes.get(&id) else { continue };
            match encode_frame(&frame) {
                Ok(text) => {
                    let _ = tx.send(text);
                }
                Err(e) => warn!("dropping unencodable frame: {e}"),
            }
        }
    }

    fn open(&mut self, tx: UnboundedSender<String>) -> SessionId {
        let id = self.sessions.connect();
        self.outboxes.insert(id, tx);
        id
    }

    fn close(&mut self, id: SessionId) {
        self.sessions.disconnect(id);
        self.outboxes.remove(&id);
    }

    fn inbound(&mut self, id: SessionId, bytes: &[u8]) {
        let Hub { world, sessions, .. } = self;
        let replies = sessions.handle(id, bytes, world);
        self.send(replies.into_iter().map(|f| (id, f)).collect());
    }
}

/// Blocking HTTP calls to device endpoints.
pub struct HttpDevices {
    client: reqwest::blocking::Client,
}

impl HttpDevices {
    pub fn new() -> anyhow::Result<Self> {
        Ok(Self {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_millis(500))
                .build()?,
        })
    }
}

impl DeviceTransport for HttpDevices {
    fn execute(&mut self, desc: &DeviceDescriptor, req: &DeviceRequest, _now: Timestamp) -> Option<HttpReply> {
        let (method, path) = req.method_and_path();
        let url = format!("{}{}", desc.endpoint.trim_end_matches('/'), path);
        let builder = match method {
            "PUT" => self.client.put(&url),
            _ => self.client.post(&url),
        };
        let resp = builder
            .header(header::CONTENT_TYPE, "application/json")
            .body(req.body().to_string())
            .send();
        match resp {
            Ok(r) => {
                let status = r.status().as_u16();
                let body = r.text().unwrap_or_default();
                Some(HttpReply { status, body })
            }
            Err(e) => {
                debug!(device = %desc.id, "device call failed: {e}");
                None
            }
        }
    }
}

impl DeviceAccess for HttpDevices {}

pub fn hub_router(hub: SharedHub) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/events", post(device_event))
        .route("/health", get(health))
        .with_state(hub)
}

async fn health(State(hub): State<SharedHub>) -> Response {
    let h = hub.lock().unwrap();
    let body = serde_json::json!({
        "scenario": h.world.config().name,
        "tick": h.world.clock().tick,
        "sessions": h.sessions.session_count(),
    });
    ([(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

async fn device_event(State(hub): State<SharedHub>, body: Bytes) -> Response {
    let event: DeviceEvent = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => return (StatusCode::BAD_REQUEST, format!("bad device event: {e}")).into_response(),
    };
    let accepted = hub.lock().unwrap().world.receive_device_event(event);
    if accepted {
        (StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], r#"{"accepted":true}"#).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, "hub unavailable").into_response()
    }
}

async fn ws_upgrade(State(hub): State<SharedHub>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| ws_session(hub, socket))
}

async fn ws_session(hub: SharedHub, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = unbounded_channel::<String>();
    let id = hub.lock().unwrap().open(tx);
    debug!(session = id, "websocket session open");
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        let bytes = match msg {
            Message::Text(t) => t.as_bytes().to_vec(),
            Message::Binary(b) => b.to_vec(),
            Message::Close(_) => break,
            _ => continue,
        };
        hub.lock().unwrap().inbound(id, &bytes);
    }
    hub.lock().unwrap().close(id);
    writer.abort();
    debug!(session = id, "websocket session closed");
}

pub async fn serve_tcp(hub: SharedHub, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                debug!(%peer, "tcp session open");
                tokio::spawn(tcp_session(hub.clone(), stream));
            }
            Err(e) => warn!("tcp accept failed: {e}"),
        }
    }
}

async fn tcp_session(hub: SharedHub, stream: TcpStream) {
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = unbounded_channel::<String>();
    let id = hub.lock().unwrap().open(tx);
    let writer = tokio::spawn(async move {
        while let Some(mut text) = rx.recv().await {
            text.push('\n');
            if write.write_all(text.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        hub.lock().unwrap().inbound(id, line.as_bytes());
    }
    hub.lock().unwrap().close(id);
    writer.abort();
}

/// Coherence reports go out once per second over the trailing window.
const REPORT_EVERY_MS: u64 = 1000;
const REPORT_WINDOW_MS: u64 = 10_000;

fn apply_fault(hub: &mut Hub, emus: Option<&Emulators>, clock: Clock, action: &Action) {
    match action {
        Action::Set { agent, var, value } => {
            if let Err(e) = hub.world.client_update("faults", agent, var, *value) {
                warn!("fault script update rejected: {e}");
            }
        }
        Action::GotoPlanet { agent, var, planet } => {
            let now = hub.world.now();
            match hub.world.planet_position_at(*planet, now) {
                Some(p) => {
                    let _ = hub
                        .world
                        .client_update("faults", agent, var, xri_core::model::Value::Position(p));
                }
                None => warn!("fault script: no planet {planet}"),
            }
        }
        Action::Press { device } => match emus.and_then(|e| e.plugs.get(device)) {
            Some(p) => {
                p.lock().unwrap().press_button(clock.now());
            }
            None => warn!("fault script: no local plug {device:?}"),
        },
        Action::Outage { device, duration_ms } => {
            let Some(emus) = emus else {
                warn!("fault script: outages need local emulators");
                return;
            };
            if let Some(p) = emus.plugs.get(device) {
                p.lock().unwrap().outages.add(clock.now(), *duration_ms);
            } else if hub.world.device(device).is_some() {
                emus.bridge.lock().unwrap().outages.add(clock.now(), *duration_ms);
            } else {
                warn!("fault script: unknown device {device:?}");
            }
            info!(device, duration_ms, "outage injected");
        }
        Action::HubOutage { duration_ms } => {
            let now = hub.world.now();
            hub.world.hub_outages.add(now, *duration_ms);
            info!(duration_ms, "hub outage injected");
        }
        Action::Expect(_) => {}
    }
}

/// Runs ticks at wall-clock pace until `stop` is set.
pub fn tick_loop(
    hub: SharedHub,
    mut devices: HttpDevices,
    stop: Arc<AtomicBool>,
    faults: Option<DemoScript>,
    emus: Option<Arc<Emulators>>,
    clock: Clock,
) {
    let tick_ms = hub.lock().unwrap().world.config().tick_ms;
    let mut pending: Vec<(u64, Action)> = faults
        .map(|s| {
            s.steps
                .into_iter()
                .filter_map(|st| match st.when {
                    xri_core::script::When::At(t) => Some((t, st.action)),
                    xri_core::script::When::End => None,
                })
                .collect()
        })
        .unwrap_or_default();
    pending.sort_by_key(|(t, _)| *t);
    pending.reverse();

    let start = Instant::now();
    let mut k: u64 = 0;
    while !stop.load(Ordering::SeqCst) {
        {
            let mut h = hub.lock().unwrap();
            let now = h.world.now();
            while pending.last().is_some_and(|(t, _)| *t <= now.0) {
                let (_, action) = pending.pop().unwrap();
                apply_fault(&mut h, emus.as_deref(), clock, &action);
            }
            match h.world.run_tick(&mut devices) {
                Ok(out) => {
                    let frames = h.sessions.publish(&out.events);
                    h.send(frames);
                }
                Err(e) => warn!("tick {} failed: {e}", now.0 / tick_ms),
            }
            if now.0 % REPORT_EVERY_MS == 0 && now.0 > 0 {
                let end = Timestamp(now.0 + tick_ms);
                let window = (Timestamp(end.0.saturating_sub(REPORT_WINDOW_MS)), end);
                let links: Vec<(String, String)> = h
                    .world
                    .config()
                    .links
                    .iter()
                    .map(|l| (l.id.clone(), l.agent_id.clone()))
                    .collect();
                for (link, agent) in links {
                    if let Ok(r) = h.world.coherence_report(&link, window) {
                        let payload = Payload::CoherenceReport(CoherencePayload {
                            link: r.link_id,
                            window: r.window,
                            spans: r.incoherent_spans,
                            noise_score: r.noise_score,
                        });
                        let frames = h.sessions.broadcast(now, &agent, payload);
                        h.send(frames);
                    }
                }
            }
        }
        k += 1;
        let next = start + Duration::from_millis(k * tick_ms);
        if let Some(wait) = next.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

pub async fn serve_http(router: Router, listener: TcpListener) {
    if let Err(e) = axum::serve(listener, router).await {
        warn!("hub server stopped: {e}");
    }
}

pub fn addr_url(addr: SocketAddr) -> String {
    format!("http://{addr}")
}
