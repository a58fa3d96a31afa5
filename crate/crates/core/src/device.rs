//! Emulated physical endpoints and the hub-side adapters that drive them.
//!
//! The emulators expose HTTP-shaped handlers (`status` + canonical JSON body)
//! so the in-process transport and the network servers return identical
//! bytes.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::model::{hsb_to_rgb, rgb_to_hsb, ColorHsb, Timestamp, Transform, Value, BRI_MAX, BRI_MIN, SAT_MAX};
use crate::sync::{Command, CommandTarget};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

impl HttpReply {
    fn json(status: u16, body: &Json) -> Self {
        Self {
            status,
            body: serde_json::to_string(body).expect("json serializes"),
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// Scripted unavailability windows, each `[start, end)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutageSchedule {
    windows: Vec<(Timestamp, Timestamp)>,
}

impl OutageSchedule {
    pub fn add(&mut self, start: Timestamp, duration_ms: u64) {
        self.windows.push((start, Timestamp(start.0 + duration_ms)));
    }

    pub fn is_down(&self, now: Timestamp) -> bool {
        self.windows.iter().any(|&(s, e)| now >= s && now < e)
    }

    pub fn clear(&mut self) {
        self.windows.clear();
    }
}

/// State of one color bulb behind the bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BulbState {
    pub on: bool,
    pub hue: u16,
    pub sat: u8,
    pub bri: u8,
}

impl Default for BulbState {
    fn default() -> Self {
        Self {
            on: false,
            hue: 0,
            sat: 0,
            bri: BRI_MAX,
        }
    }
}

impl From<ColorHsb> for BulbState {
    fn from(c: ColorHsb) -> Self {
        Self {
            on: c.on,
            hue: c.hue,
            sat: c.sat,
            bri: c.bri,
        }
    }
}

impl From<BulbState> for ColorHsb {
    fn from(b: BulbState) -> Self {
        ColorHsb {
            on: b.on,
            hue: b.hue,
            sat: b.sat,
            bri: b.bri,
        }
    }
}

/// Outcome of one field of a state write.
#[derive(Debug, Clone, PartialEq)]
pub enum PutEntry {
    Success { address: String, value: Json },
    Error { kind: u16, address: String, description: String },
}

impl PutEntry {
    fn to_json(&self) -> Json {
        match self {
            PutEntry::Success { address, value } => {
                let mut inner = Map::new();
                inner.insert(address.clone(), value.clone());
                json!({ "success": inner })
            }
            PutEntry::Error {
                kind,
                address,
                description,
            } => json!({ "error": { "type": kind, "address": address, "description": description } }),
        }
    }
}

fn bridge_error(kind: u16, address: &str, description: &str) -> Json {
    json!([{ "error": { "type": kind, "address": address, "description": description } }])
}

/// Color-bulb bridge emulator (lights list, read, write-state).
#[derive(Debug, Clone)]
pub struct HueBridge {
    user: String,
    lights: BTreeMap<u32, BulbState>,
    pub outages: OutageSchedule,
}

impl HueBridge {
    pub fn new(user: impl Into<String>, bulbs: u32) -> Self {
        Self {
            user: user.into(),
            lights: (1..=bulbs).map(|id| (id, BulbState::default())).collect(),
            outages: OutageSchedule::default(),
        }
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn light(&self, id: u32) -> Option<BulbState> {
        self.lights.get(&id).copied()
    }

    /// Snapshot of every light. Fails only while an outage is active.
    pub fn get_lights(&self, now: Timestamp) -> Result<BTreeMap<u32, BulbState>, DeviceError> {
        if self.outages.is_down(now) {
            return Err(DeviceError::Unavailable);
        }
        Ok(self.lights.clone())
    }

    /// Applies the fields of a partial state write, in request order.
    /// Out-of-range fields are reported and skipped; the others still apply.
    pub fn put_state(&mut self, now: Timestamp, id: u32, body: &Json) -> Result<Vec<PutEntry>, DeviceError> {
        if self.outages.is_down(now) {
            return Err(DeviceError::Unavailable);
        }
        let Some(state) = self.lights.get_mut(&id) else {
            return Err(DeviceError::UnknownLight(id));
        };
        let Some(fields) = body.as_object() else {
            return Err(DeviceError::InvalidBody);
        };
        let mut entries = Vec::with_capacity(fields.len());
        for (field, value) in fields {
            let address = format!("/lights/{id}/state/{field}");
            let invalid = || PutEntry::Error {
                kind: 7,
                address: address.clone(),
                description: format!("invalid value, {value}, for parameter, {field}"),
            };
            let int = value.as_u64();
            let entry = match field.as_str() {
                "on" => match value.as_bool() {
                    Some(b) => {
                        state.on = b;
                        None
                    }
                    None => Some(invalid()),
                },
                "hue" => match int.filter(|h| *h <= u64::from(u16::MAX)) {
                    Some(h) => {
                        state.hue = h as u16;
                        None
                    }
                    None => Some(invalid()),
                },
                "sat" => match int.filter(|s| *s <= u64::from(SAT_MAX)) {
                    Some(s) => {
                        state.sat = s as u8;
                        None
                    }
                    None => Some(invalid()),
                },
                "bri" => match int.filter(|b| (u64::from(BRI_MIN)..=u64::from(BRI_MAX)).contains(b)) {
                    Some(b) => {
                        state.bri = b as u8;
                        None
                    }
                    None => Some(invalid()),
                },
                _ => Some(PutEntry::Error {
                    kind: 6,
                    address: address.clone(),
                    description: format!("parameter, {field}, not available"),
                }),
            };
            entries.push(entry.unwrap_or(PutEntry::Success {
                address,
                value: value.clone(),
            }));
        }
        Ok(entries)
    }

    fn light_json(id: u32, s: &BulbState) -> Json {
        json!({
            "state": {
                "on": s.on,
                "bri": s.bri,
                "hue": s.hue,
                "sat": s.sat,
                "colormode": "hs",
                "reachable": true
            },
            "type": "Extended color light",
            "name": format!("Hue color lamp {id}"),
            "modelid": "LCT015"
        })
    }

    fn check_user(&self, user: &str, address: &str) -> Option<HttpReply> {
        (user != self.user).then(|| HttpReply::json(200, &bridge_error(1, address, "unauthorized user")))
    }

    fn unavailable() -> HttpReply {
        HttpReply::json(503, &bridge_error(901, "/", "Internal error, 503"))
    }

    /// `GET /api/{user}/lights`
    pub fn handle_get_lights(&self, now: Timestamp, user: &str) -> HttpReply {
        if let Some(r) = self.check_user(user, "/lights") {
            return r;
        }
        match self.get_lights(now) {
            Ok(lights) => {
                let mut obj = Map::new();
                for (id, s) in &lights {
                    obj.insert(id.to_string(), Self::light_json(*id, s));
                }
                HttpReply::json(200, &Json::Object(obj))
            }
            Err(_) => Self::unavailable(),
        }
    }

    /// `GET /api/{user}/lights/{id}`
    pub fn handle_get_light(&self, now: Timestamp, user: &str, id: &str) -> HttpReply {
        let address = format!("/lights/{id}");
        if let Some(r) = self.check_user(user, &address) {
            return r;
        }
        if self.outages.is_down(now) {
            return Self::unavailable();
        }
        match id.parse::<u32>().ok().and_then(|n| self.lights.get(&n).map(|s| (n, s))) {
            Some((n, s)) => HttpReply::json(200, &Self::light_json(n, s)),
            None => HttpReply::json(
                200,
                &bridge_error(3, &address, &format!("resource, {address}, not available")),
            ),
        }
    }

    /// `PUT /api/{user}/lights/{id}/state`
    pub fn handle_put_state(&mut self, now: Timestamp, user: &str, id: &str, body: &[u8]) -> HttpReply {
        let address = format!("/lights/{id}/state");
        if let Some(r) = self.check_user(user, &address) {
            return r;
        }
        let parsed: Result<Json, _> = serde_json::from_slice(body);
        let light = id.parse::<u32>().map_err(|_| DeviceError::UnknownLight(0));
        let result = match (light, parsed) {
            (Err(_), _) => Err(DeviceError::UnknownLight(0)),
            (Ok(_), Err(_)) => Err(DeviceError::InvalidBody),
            (Ok(n), Ok(json)) => self.put_state(now, n, &json),
        };
        match result {
            Ok(entries) => HttpReply::json(200, &Json::Array(entries.iter().map(PutEntry::to_json).collect())),
            Err(DeviceError::Unavailable) => Self::unavailable(),
            Err(DeviceError::InvalidBody) => {
                HttpReply::json(200, &bridge_error(2, &address, "body contains invalid json"))
            }
            Err(_) => HttpReply::json(
                200,
                &bridge_error(3, &address, &format!("resource, {address}, not available")),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlugState {
    pub on: bool,
    pub last_event: Option<String>,
}

/// Device-originated notification posted to the hub callback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEvent {
    pub device: String,
    pub var: String,
    pub value: Value,
    pub press_seq: u64,
}

impl DeviceEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("device events serialize")
    }
}

/// Exponential retry delay for callback delivery, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub base_ms: u64,
    pub max_ms: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base_ms: 50,
            max_ms: 800,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempts: u32) -> u64 {
        self.base_ms
            .saturating_mul(1u64 << attempts.min(20))
            .min(self.max_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PendingEvent {
    event: DeviceEvent,
    attempts: u32,
    next_attempt: Timestamp,
}

pub const PLUG_ON_EVENT: &str = "lamp_on";
pub const PLUG_OFF_EVENT: &str = "lamp_off";
pub const PRESS_EVENT: &str = "button_press";

/// Webhook smart plug with a physical button.
#[derive(Debug, Clone)]
pub struct SmartPlug {
    id: String,
    key: String,
    state: PlugState,
    press_seq: u64,
    outbox: VecDeque<PendingEvent>,
    pub backoff: Backoff,
    pub outages: OutageSchedule,
}

impl SmartPlug {
    pub fn new(id: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            key: key.into(),
            state: PlugState::default(),
            press_seq: 0,
            outbox: VecDeque::new(),
            backoff: Backoff::default(),
            outages: OutageSchedule::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> &PlugState {
        &self.state
    }

    pub fn pending_events(&self) -> usize {
        self.outbox.len()
    }

    /// Webhook trigger: `lamp_on` / `lamp_off` with the configured key.
    pub fn trigger(&mut self, now: Timestamp, event: &str, key: &str) -> Result<PlugState, DeviceError> {
        if self.outages.is_down(now) {
            return Err(DeviceError::Unavailable);
        }
        if key != self.key {
            return Err(DeviceError::BadKey);
        }
        let on = match event {
            PLUG_ON_EVENT => true,
            PLUG_OFF_EVENT => false,
            other => return Err(DeviceError::UnknownEvent(other.to_string())),
        };
        self.state.on = on;
        self.state.last_event = Some(event.to_string());
        Ok(self.state.clone())
    }

    /// Physical button: toggles power and queues a notification for the hub.
    /// Works during an outage; only delivery is deferred.
    pub fn press_button(&mut self, now: Timestamp) -> PlugState {
        self.state.on = !self.state.on;
        self.state.last_event = Some(PRESS_EVENT.to_string());
        self.press_seq += 1;
        self.outbox.push_back(PendingEvent {
            event: DeviceEvent {
                device: self.id.clone(),
                var: "power".into(),
                value: Value::Bool(self.state.on),
                press_seq: self.press_seq,
            },
            attempts: 0,
            next_attempt: now,
        });
        self.state.clone()
    }

    pub fn press_seq(&self) -> u64 {
        self.press_seq
    }

    /// Events due for delivery at `now`, oldest first. Head-of-line: a
    /// failing event blocks later ones so the hub sees presses in order.
    pub fn due_event(&self, now: Timestamp) -> Option<&DeviceEvent> {
        if self.outages.is_down(now) {
            return None;
        }
        self.outbox
            .front()
            .filter(|p| p.next_attempt <= now)
            .map(|p| &p.event)
    }

    /// Reports the outcome of delivering the head event.
    pub fn delivery_result(&mut self, now: Timestamp, delivered: bool) {
        if delivered {
            self.outbox.pop_front();
        } else if let Some(head) = self.outbox.front_mut() {
            head.next_attempt = Timestamp(now.0 + self.backoff.delay(head.attempts));
            head.attempts += 1;
        }
    }

    /// Delivers queued events through `send` until one fails or none is due.
    pub fn flush(&mut self, now: Timestamp, mut send: impl FnMut(&DeviceEvent) -> bool) -> usize {
        let mut delivered = 0;
        while let Some(event) = self.due_event(now).cloned() {
            let ok = send(&event);
            self.delivery_result(now, ok);
            if !ok {
                break;
            }
            delivered += 1;
        }
        delivered
    }

    fn state_json(&self) -> Json {
        json!({ "on": self.state.on, "last_event": self.state.last_event })
    }

    /// `POST /trigger/{event}/with/key/{key}`
    pub fn handle_trigger(&mut self, now: Timestamp, event: &str, key: &str) -> HttpReply {
        match self.trigger(now, event, key) {
            Ok(_) => HttpReply::json(200, &json!({ "event": event, "state": self.state_json() })),
            Err(DeviceError::BadKey) => {
                HttpReply::json(401, &json!({ "errors": [{ "message": "You sent an invalid key." }] }))
            }
            Err(DeviceError::UnknownEvent(e)) => HttpReply::json(
                404,
                &json!({ "errors": [{ "message": format!("Unknown event {e:?}.") }] }),
            ),
            Err(_) => HttpReply::json(503, &json!({ "errors": [{ "message": "Service unavailable." }] })),
        }
    }

    /// `GET /state`
    pub fn handle_state(&self, now: Timestamp) -> HttpReply {
        if self.outages.is_down(now) {
            return HttpReply::json(503, &json!({ "errors": [{ "message": "Service unavailable." }] }));
        }
        HttpReply::json(200, &self.state_json())
    }

    /// `POST /press`
    pub fn handle_press(&mut self, now: Timestamp) -> HttpReply {
        self.press_button(now);
        HttpReply::json(
            200,
            &json!({ "on": self.state.on, "last_event": self.state.last_event, "press_seq": self.press_seq }),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device unavailable")]
    Unavailable,
    #[error("unknown light {0}")]
    UnknownLight(u32),
    #[error("body contains invalid json")]
    InvalidBody,
    #[error("invalid key")]
    BadKey,
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    ColorBulb,
    Plug,
}

/// An emulated IoT endpoint as the hub knows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescriptor {
    pub id: String,
    pub kind: DeviceKind,
    /// Bridge base (`http://host:port/api/{user}`) or plug base URL.
    pub endpoint: String,
    /// Hub webhook for device-originated events.
    #[serde(default)]
    pub callback: Option<String>,
    /// Light number on the bridge, for color bulbs.
    #[serde(default)]
    pub light: Option<u32>,
    /// Webhook key, for plugs.
    #[serde(default)]
    pub key: Option<String>,
}

/// A device call produced from a hub command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceRequest {
    BridgePut { light: u32, body: String },
    PlugTrigger { event: &'static str, key: String },
}

impl DeviceRequest {
    /// HTTP method and path relative to the descriptor endpoint.
    pub fn method_and_path(&self) -> (&'static str, String) {
        match self {
            DeviceRequest::BridgePut { light, .. } => ("PUT", format!("/lights/{light}/state")),
            DeviceRequest::PlugTrigger { event, key } => ("POST", format!("/trigger/{event}/with/key/{key}")),
        }
    }

    pub fn body(&self) -> &str {
        match self {
            DeviceRequest::BridgePut { body, .. } => body,
            DeviceRequest::PlugTrigger { .. } => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("{device}: {var} cannot carry a {kind} value on a {device_kind:?}")]
    SchemaMismatch {
        device: String,
        device_kind: DeviceKind,
        var: String,
        kind: String,
    },
    #[error("{0}: command is not addressed to a device")]
    NotADeviceCommand(String),
    #[error("{device}: missing {what} in descriptor")]
    Descriptor { device: String, what: &'static str },
    #[error("{device}: transport failure: {reason}")]
    Transport { device: String, reason: String },
    #[error("{device}: rejected: {body}")]
    Rejected { device: String, body: String },
}

impl AdapterError {
    /// Transport failures are retried and surface as divergence.
    pub fn is_retriable(&self) -> bool {
        matches!(self, AdapterError::Transport { .. })
    }
}

/// Translates a hub command into the device-specific call.
pub fn translate_command(desc: &DeviceDescriptor, cmd: &Command) -> Result<DeviceRequest, AdapterError> {
    if cmd.target != CommandTarget::Device {
        return Err(AdapterError::NotADeviceCommand(desc.id.clone()));
    }
    let mismatch = || AdapterError::SchemaMismatch {
        device: desc.id.clone(),
        device_kind: desc.kind,
        var: cmd.var.clone(),
        kind: cmd.value.kind().to_string(),
    };
    match (desc.kind, cmd.var.as_str(), cmd.value) {
        (DeviceKind::Plug, "power", Value::Bool(on)) => Ok(DeviceRequest::PlugTrigger {
            event: if on { PLUG_ON_EVENT } else { PLUG_OFF_EVENT },
            key: desc.key.clone().ok_or(AdapterError::Descriptor {
                device: desc.id.clone(),
                what: "key",
            })?,
        }),
        (DeviceKind::ColorBulb, "color", Value::Color(c)) => {
            let light = desc.light.ok_or(AdapterError::Descriptor {
                device: desc.id.clone(),
                what: "light",
            })?;
            let hsb = match cmd.transform {
                Transform::RgbToHsb => rgb_to_hsb(c),
                Transform::Identity => return Err(mismatch()),
            };
            let body = json!({ "on": hsb.on, "hue": hsb.hue, "sat": hsb.sat, "bri": hsb.bri });
            Ok(DeviceRequest::BridgePut {
                light,
                body: body.to_string(),
            })
        }
        (DeviceKind::ColorBulb, "power", Value::Bool(on)) => Ok(DeviceRequest::BridgePut {
            light: desc.light.ok_or(AdapterError::Descriptor {
                device: desc.id.clone(),
                what: "light",
            })?,
            body: json!({ "on": on }).to_string(),
        }),
        _ => Err(mismatch()),
    }
}

/// Moves requests to devices: in-process emulators or the network.
pub trait DeviceTransport {
    /// `None` means the device could not be reached at all.
    fn execute(&mut self, desc: &DeviceDescriptor, req: &DeviceRequest, now: Timestamp) -> Option<HttpReply>;
}

/// Interprets a device reply as the value now held by the physical side,
/// expressed in the virtual domain.
pub fn interpret_reply(
    desc: &DeviceDescriptor,
    cmd: &Command,
    req: &DeviceRequest,
    reply: Option<HttpReply>,
) -> Result<Value, AdapterError> {
    let Some(reply) = reply else {
        return Err(AdapterError::Transport {
            device: desc.id.clone(),
            reason: "unreachable".into(),
        });
    };
    if reply.status >= 500 {
        return Err(AdapterError::Transport {
            device: desc.id.clone(),
            reason: format!("status {}", reply.status),
        });
    }
    let rejected = || AdapterError::Rejected {
        device: desc.id.clone(),
        body: reply.body.clone(),
    };
    if !reply.is_success() {
        return Err(rejected());
    }
    match req {
        DeviceRequest::PlugTrigger { event, .. } => Ok(Value::Bool(*event == PLUG_ON_EVENT)),
        DeviceRequest::BridgePut { body, .. } => {
            let entries: Vec<Json> = serde_json::from_str(&reply.body).map_err(|_| rejected())?;
            if entries.iter().any(|e| e.get("success").is_none()) {
                return Err(rejected());
            }
            let sent: Json = serde_json::from_str(body).map_err(|_| rejected())?;
            match cmd.value {
                Value::Color(_) => {
                    let hsb = ColorHsb {
                        on: sent["on"].as_bool().unwrap_or(false),
                        hue: sent["hue"].as_u64().unwrap_or(0) as u16,
                        sat: sent["sat"].as_u64().unwrap_or(0) as u8,
                        bri: sent["bri"].as_u64().unwrap_or(1) as u8,
                    };
                    Ok(Value::Color(hsb_to_rgb(hsb)))
                }
                other => Ok(other),
            }
        }
    }
}

/// Sends one hub command to its device and reports the applied value.
pub fn adapter_send(
    transport: &mut dyn DeviceTransport,
    desc: &DeviceDescriptor,
    cmd: &Command,
    now: Timestamp,
) -> Result<Value, AdapterError> {
    let req = translate_command(desc, cmd)?;
    let reply = transport.execute(desc, &req, now);
    interpret_reply(desc, cmd, &req, reply)
}

/// In-process emulators addressed by device id.
#[derive(Debug, Clone)]
pub struct LocalDevices {
    pub bridge: HueBridge,
    pub plugs: BTreeMap<String, SmartPlug>,
}

impl LocalDevices {
    pub fn new(bridge: HueBridge) -> Self {
        Self {
            bridge,
            plugs: BTreeMap::new(),
        }
    }

    /// Physical value a device currently holds for `var`, ground truth for
    /// coherence sampling.
    pub fn physical_value(&self, desc: &DeviceDescriptor, var: &str) -> Option<Value> {
        match (desc.kind, var) {
            (DeviceKind::Plug, "power") => self.plugs.get(&desc.id).map(|p| Value::Bool(p.state().on)),
            (DeviceKind::ColorBulb, "color") => desc
                .light
                .and_then(|l| self.bridge.light(l))
                .map(|s| Value::Color(hsb_to_rgb(s.into()))),
            (DeviceKind::ColorBulb, "power") => desc.light.and_then(|l| self.bridge.light(l)).map(|s| Value::Bool(s.on)),
            _ => None,
        }
    }
}

impl DeviceTransport for LocalDevices {
    fn execute(&mut self, desc: &DeviceDescriptor, req: &DeviceRequest, now: Timestamp) -> Option<HttpReply> {
        match req {
            DeviceRequest::BridgePut { light, body } => {
                let user = self.bridge.user().to_string();
                Some(
                    self.bridge
                        .handle_put_state(now, &user, &light.to_string(), body.as_bytes()),
                )
            }
            DeviceRequest::PlugTrigger { event, key } => {
                let plug = self.plugs.get_mut(&desc.id)?;
                Some(plug.handle_trigger(now, event, key))
            }
        }
    }
}
