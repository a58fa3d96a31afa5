//! HTTP front ends for the bridge and plug emulators.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use tokio::net::TcpListener;
use tracing::{debug, info, warn};
use xri_core::config::ScenarioConfig;
use xri_core::device::{DeviceKind, HttpReply, HueBridge, SmartPlug};
use xri_core::model::Timestamp;

/// Milliseconds since process start, shared by emulators and fault scripts.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    epoch: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self { epoch: Instant::now() }
    }

    pub fn now(&self) -> Timestamp {
        Timestamp(self.epoch.elapsed().as_millis() as u64)
    }
}

pub type SharedBridge = Arc<Mutex<HueBridge>>;
pub type SharedPlug = Arc<Mutex<SmartPlug>>;

fn respond(reply: HttpReply) -> Response {
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], reply.body).into_response()
}

#[derive(Clone)]
struct BridgeState {
    bridge: SharedBridge,
    clock: Clock,
}

pub fn bridge_router(bridge: SharedBridge, clock: Clock) -> Router {
    async fn lights(State(s): State<BridgeState>, Path(user): Path<String>) -> Response {
        respond(s.bridge.lock().unwrap().handle_get_lights(s.clock.now(), &user))
    }
    async fn light(State(s): State<BridgeState>, Path((user, id)): Path<(String, String)>) -> Response {
        respond(s.bridge.lock().unwrap().handle_get_light(s.clock.now(), &user, &id))
    }
    async fn put_state(State(s): State<BridgeState>, Path((user, id)): Path<(String, String)>, body: Bytes) -> Response {
        respond(s.bridge.lock().unwrap().handle_put_state(s.clock.now(), &user, &id, &body))
    }
    Router::new()
        .route("/api/{user}/lights", get(lights))
        .route("/api/{user}/lights/{id}", get(light))
        .route("/api/{user}/lights/{id}/state", put(put_state))
        .with_state(BridgeState { bridge, clock })
}

#[derive(Clone)]
struct PlugState {
    plug: SharedPlug,
    clock: Clock,
}

pub fn plug_router(plug: SharedPlug, clock: Clock) -> Router {
    async fn trigger(State(s): State<PlugState>, Path((event, key)): Path<(String, String)>) -> Response {
        respond(s.plug.lock().unwrap().handle_trigger(s.clock.now(), &event, &key))
    }
    async fn state(State(s): State<PlugState>) -> Response {
        respond(s.plug.lock().unwrap().handle_state(s.clock.now()))
    }
    async fn press(State(s): State<PlugState>) -> Response {
        respond(s.plug.lock().unwrap().handle_press(s.clock.now()))
    }
    Router::new()
        .route("/trigger/{event}/with/key/{key}", post(trigger))
        .route("/state", get(state))
        .route("/press", post(press))
        .with_state(PlugState { plug, clock })
}

/// Pushes queued button events to `{callback}/events`, retrying with the
/// plug's backoff.
pub async fn deliver_callbacks(plug: SharedPlug, clock: Clock, callback: String) {
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(1))
        .build()
        .expect("http client");
    let url = format!("{}/events", callback.trim_end_matches('/'));
    loop {
        let due = plug.lock().unwrap().due_event(clock.now()).cloned();
        let Some(event) = due else {
            tokio::time::sleep(Duration::from_millis(10)).await;
            continue;
        };
        let sent = client
            .post(&url)
            .header(header::CONTENT_TYPE, "application/json")
            .body(event.to_json())
            .send()
            .await;
        let ok = matches!(&sent, Ok(r) if r.status().is_success());
        if !ok {
            debug!(device = %event.device, press_seq = event.press_seq, "callback failed, will retry");
        }
        plug.lock().unwrap().delivery_result(clock.now(), ok);
    }
}

/// Running emulators of one scenario.
pub struct Emulators {
    pub bridge: SharedBridge,
    pub bridge_addr: Option<SocketAddr>,
    pub plugs: BTreeMap<String, SharedPlug>,
    pub plug_addrs: BTreeMap<String, SocketAddr>,
}

async fn serve(router: Router, addr: SocketAddr, what: &str) -> anyhow::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {what} on {addr}"))?;
    let bound = listener.local_addr()?;
    let label = what.to_string();
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            warn!("{label} server stopped: {e}");
        }
    });
    Ok(bound)
}

impl Emulators {
    /// Starts every emulator the scenario needs. Plugs take consecutive
    /// ports from `plug_port` (all ephemeral when it is 0). Button events go
    /// to `callback`, or to each plug's configured callback when `None`.
    pub async fn spawn(
        cfg: &ScenarioConfig,
        host: std::net::IpAddr,
        bridge_port: u16,
        plug_port: u16,
        callback: Option<&str>,
        clock: Clock,
    ) -> anyhow::Result<Self> {
        let bridge = Arc::new(Mutex::new(HueBridge::new(cfg.bridge_user.clone(), cfg.bridge_lights)));
        let mut out = Emulators {
            bridge: bridge.clone(),
            bridge_addr: None,
            plugs: BTreeMap::new(),
            plug_addrs: BTreeMap::new(),
        };
        if cfg.devices.iter().any(|d| d.kind == DeviceKind::ColorBulb) {
            let addr = serve(bridge_router(bridge, clock), SocketAddr::new(host, bridge_port), "bridge emulator").await?;
            info!(%addr, lights = cfg.bridge_lights, "bridge emulator up");
            out.bridge_addr = Some(addr);
        }
        let plugs = cfg.devices.iter().filter(|d| d.kind == DeviceKind::Plug);
        for (i, d) in plugs.enumerate() {
            let plug = Arc::new(Mutex::new(SmartPlug::new(d.id.clone(), d.key.clone().unwrap_or_default())));
            let port = if plug_port == 0 { 0 } else { plug_port + i as u16 };
            let addr = serve(plug_router(plug.clone(), clock), SocketAddr::new(host, port), "plug emulator").await?;
            info!(%addr, device = %d.id, "plug emulator up");
            let target = callback.map(str::to_string).or_else(|| d.callback.clone());
            match target {
                Some(url) => {
                    tokio::spawn(deliver_callbacks(plug.clone(), clock, url));
                }
                None => warn!(device = %d.id, "no callback configured; button presses stay queued"),
            }
            out.plug_addrs.insert(d.id.clone(), addr);
            out.plugs.insert(d.id.clone(), plug);
        }
        Ok(out)
    }

    /// Points the scenario's device endpoints at these emulators.
    pub fn rewrite_endpoints(&self, cfg: &mut ScenarioConfig, callback: &str) {
        for d in &mut cfg.devices {
            match d.kind {
                DeviceKind::ColorBulb => {
                    if let Some(addr) = self.bridge_addr {
                        d.endpoint = format!("http://{addr}/api/{}", cfg.bridge_user);
                    }
                }
                DeviceKind::Plug => {
                    if let Some(addr) = self.plug_addrs.get(&d.id) {
                        d.endpoint = format!("http://{addr}");
                        d.callback = Some(callback.to_string());
                    }
                }
            }
        }
    }
}
