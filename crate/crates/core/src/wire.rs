//! Session layer between the hub and scene clients.
//!
//! Every message is one JSON object per text frame with top-level keys in
//! the fixed order `v, type, seq, ts, agent, payload`. Payload keys follow
//! the field order of the payload structs below.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::model::{Origin, Timestamp, Value};
use crate::sync::{CommandTarget, RelationshipClass};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Hello,
    Subscribe,
    StateUpdate,
    Command,
    Event,
    CoherenceReport,
    Error,
    Ack,
}

impl FrameType {
    pub const ALL: [FrameType; 8] = [
        FrameType::Hello,
        FrameType::Subscribe,
        FrameType::StateUpdate,
        FrameType::Command,
        FrameType::Event,
        FrameType::CoherenceReport,
        FrameType::Error,
        FrameType::Ack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameType::Hello => "hello",
            FrameType::Subscribe => "subscribe",
            FrameType::StateUpdate => "state_update",
            FrameType::Command => "command",
            FrameType::Event => "event",
            FrameType::CoherenceReport => "coherence_report",
            FrameType::Error => "error",
            FrameType::Ack => "ack",
        }
    }
}

impl FromStr for FrameType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FrameType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WireError::new(ErrorCode::UnknownType, format!("unknown frame type {s:?}")))
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadFrame,
    BadVersion,
    StaleSeq,
    UnknownType,
    NoHello,
    UnknownAgent,
    UnknownVar,
    Unsupported,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadFrame => "bad_frame",
            ErrorCode::BadVersion => "bad_version",
            ErrorCode::StaleSeq => "stale_seq",
            ErrorCode::UnknownType => "unknown_type",
            ErrorCode::NoHello => "no_hello",
            ErrorCode::UnknownAgent => "unknown_agent",
            ErrorCode::UnknownVar => "unknown_var",
            ErrorCode::Unsupported => "unsupported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}: {message}", code.as_str())]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadFrame, message)
    }
}

/// Agent selection of a subscription: `"*"` or a non-empty list of ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentFilter {
    Wildcard,
    Agents(BTreeSet<String>),
}

impl AgentFilter {
    pub fn matches(&self, agent: &str) -> bool {
        match self {
            AgentFilter::Wildcard => true,
            AgentFilter::Agents(set) => set.contains(agent),
        }
    }
}

impl Serialize for AgentFilter {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            AgentFilter::Wildcard => serializer.serialize_str("*"),
            AgentFilter::Agents(set) => set.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for AgentFilter {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Star(String),
            List(BTreeSet<String>),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Star(s) if s == "*" => Ok(AgentFilter::Wildcard),
            Repr::Star(s) => Err(serde::de::Error::custom(format!("expected \"*\", got {s:?}"))),
            Repr::List(set) if set.is_empty() => Err(serde::de::Error::custom("empty agent filter")),
            Repr::List(set) => Ok(AgentFilter::Agents(set)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloPayload {
    pub client: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscribePayload {
    pub agents: AgentFilter,
    /// Empty means every class.
    #[serde(default)]
    pub classes: BTreeSet<RelationshipClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateUpdatePayload {
    pub var: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandPayload {
    pub target: CommandTarget,
    pub scope: String,
    pub var: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPayload {
    pub var: String,
    pub value: Value,
    pub origin: Origin,
    pub hub_ts: Timestamp,
    pub class: RelationshipClass,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherencePayload {
    pub link: String,
    pub window: (Timestamp, Timestamp),
    pub spans: Vec<(Timestamp, Timestamp)>,
    pub noise_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckPayload {
    pub ack_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello(HelloPayload),
    Subscribe(SubscribePayload),
    StateUpdate(StateUpdatePayload),
    Command(CommandPayload),
    Event(EventPayload),
    CoherenceReport(CoherencePayload),
    Error(ErrorPayload),
    Ack(AckPayload),
}

impl Payload {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Payload::Hello(_) => FrameType::Hello,
            Payload::Subscribe(_) => FrameType::Subscribe,
            Payload::StateUpdate(_) => FrameType::StateUpdate,
            Payload::Command(_) => FrameType::Command,
            Payload::Event(_) => FrameType::Event,
            Payload::CoherenceReport(_) => FrameType::CoherenceReport,
            Payload::Error(_) => FrameType::Error,
            Payload::Ack(_) => FrameType::Ack,
        }
    }

    fn to_json(&self) -> Json {
        let v = match self {
            Payload::Hello(p) => serde_json::to_value(p),
            Payload::Subscribe(p) => serde_json::to_value(p),
            Payload::StateUpdate(p) => serde_json::to_value(p),
            Payload::Command(p) => serde_json::to_value(p),
            Payload::Event(p) => serde_json::to_value(p),
            Payload::CoherenceReport(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
            Payload::Ack(p) => serde_json::to_value(p),
        };
        v.expect("payload structs serialize")
    }

    fn from_json(kind: FrameType, json: Json) -> Result<Self, WireError> {
        fn parse<T: DeserializeOwned>(json: Json) -> Result<T, WireError> {
            serde_json::from_value(json).map_err(|e| WireError::bad(format!("payload: {e}")))
        }
        Ok(match kind {
            FrameType::Hello => Payload::Hello(parse(json)?),
            FrameType::Subscribe => Payload::Subscribe(parse(json)?),
            FrameType::StateUpdate => Payload::StateUpdate(parse(json)?),
            FrameType::Command => Payload::Command(parse(json)?),
            FrameType::Event => Payload::Event(parse(json)?),
            FrameType::CoherenceReport => Payload::CoherenceReport(parse(json)?),
            FrameType::Error => Payload::Error(parse(json)?),
            FrameType::Ack => Payload::Ack(parse(json)?),
        })
    }

    fn validate(&self) -> Result<(), WireError> {
        let var_ok = |var: &str| {
            if var.is_empty() {
                Err(WireError::bad("empty variable name"))
            } else {
                Ok(())
            }
        };
        let value_ok = |v: &Value| {
            if v.is_valid() {
                Ok(())
            } else {
                Err(WireError::bad("value out of range"))
            }
        };
        match self {
            Payload::StateUpdate(p) => {
                var_ok(&p.var)?;
                value_ok(&p.value)
            }
            Payload::Command(p) => {
                var_ok(&p.var)?;
                if p.scope.is_empty() {
                    return Err(WireError::bad("empty command scope"));
                }
                value_ok(&p.value)
            }
            Payload::Event(p) => {
                var_ok(&p.var)?;
                value_ok(&p.value)
            }
            Payload::Subscribe(p) => match &p.agents {
                AgentFilter::Agents(set) if set.is_empty() => Err(WireError::bad("empty agent filter")),
                _ => Ok(()),
            },
            Payload::CoherenceReport(p) => {
                let (start, end) = p.window;
                if end < start {
                    return Err(WireError::bad("inverted window"));
                }
                if !(0.0..=1.0).contains(&p.noise_score) {
                    return Err(WireError::bad("noise_score outside [0,1]"));
                }
                let mut prev_end = start;
                for &(s, e) in &p.spans {
                    if s < prev_end || e < s || e > end {
                        return Err(WireError::bad("spans must be ordered, disjoint and inside the window"));
                    }
                    prev_end = e;
                }
                Ok(())
            }
            Payload::Hello(_) | Payload::Error(_) | Payload::Ack(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub v: u32,
    pub seq: u64,
    /// Sender-local time; advisory only.
    pub ts: Timestamp,
    pub agent: Option<String>,
    pub payload: Payload,
}

impl Frame {
    pub fn new(seq: u64, ts: Timestamp, agent: Option<String>, payload: Payload) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            seq,
            ts,
            agent,
            payload,
        }
    }

    pub fn frame_type(&self) -> FrameType {
        self.payload.frame_type()
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.v != PROTOCOL_VERSION {
            return Err(WireError::new(
                ErrorCode::BadVersion,
                format!("unsupported protocol version {}", self.v),
            ));
        }
        if self.agent.as_deref() == Some("") {
            return Err(WireError::bad("empty agent id"));
        }
        self.payload.validate()
    }
}

/// Serializes a valid frame to its canonical single-line JSON text.
pub fn encode_frame(frame: &Frame) -> Result<String, WireError> {
    frame.validate()?;
    let mut obj = Map::new();
    obj.insert("v".into(), Json::from(frame.v));
    obj.insert("type".into(), Json::from(frame.frame_type().as_str()));
    obj.insert("seq".into(), Json::from(frame.seq));
    obj.insert("ts".into(), Json::from(frame.ts.0));
    obj.insert(
        "agent".into(),
        frame.agent.clone().map(Json::String).unwrap_or(Json::Null),
    );
    obj.insert("payload".into(), frame.payload.to_json());
    serde_json::to_string(&Json::Object(obj)).map_err(|e| WireError::bad(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    v: u32,
    #[serde(rename = "type")]
    kind: String,
    seq: u64,
    ts: u64,
    #[serde(default)]
    agent: Option<String>,
    payload: Json,
}

/// Strict parse of one frame. Stateless: sequence checks live in [`Session`].
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let raw: RawFrame =
        serde_json::from_slice(bytes).map_err(|e| WireError::bad(format!("malformed frame: {e}")))?;
    let kind: FrameType = raw.kind.parse()?;
    let payload = Payload::from_json(kind, raw.payload)?;
    let frame = Frame {
        v: raw.v,
        seq: raw.seq,
        ts: Timestamp(raw.ts),
        agent: raw.agent,
        payload,
    };
    frame.validate()?;
    Ok(frame)
}

pub type SessionId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Subscription {
    pub session: SessionId,
    pub filter: AgentFilter,
    /// Empty means every class.
    pub classes: BTreeSet<RelationshipClass>,
}

impl Subscription {
    pub fn matches(&self, agent: &str, class: RelationshipClass) -> bool {
        self.filter.matches(agent) && (self.classes.is_empty() || self.classes.contains(&class))
    }
}

/// Per-connection protocol state.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: SessionId,
    pub client: Option<String>,
    last_in_seq: Option<u64>,
    out_seq: u64,
    subscriptions: Vec<Subscription>,
    last_event_ts: Timestamp,
}

impl Session {
    pub fn new(id: SessionId) -> Self {
        Self {
            id,
            client: None,
            last_in_seq: None,
            out_seq: 0,
            subscriptions: Vec::new(),
            last_event_ts: Timestamp(0),
        }
    }

    pub fn has_hello(&self) -> bool {
        self.client.is_some()
    }

    /// Decodes an inbound frame and enforces the per-session sequence rule.
    /// A rejected frame leaves the session state untouched.
    pub fn receive(&mut self, bytes: &[u8]) -> Result<Frame, WireError> {
        let frame = decode_frame(bytes)?;
        if self.last_in_seq.is_some_and(|last| frame.seq <= last) {
            return Err(WireError::new(
                ErrorCode::StaleSeq,
                format!("seq {} not after {}", frame.seq, self.last_in_seq.unwrap_or(0)),
            ));
        }
        self.last_in_seq = Some(frame.seq);
        Ok(frame)
    }

    /// Builds the next outbound frame of this session.
    pub fn outbound(&mut self, ts: Timestamp, agent: Option<String>, payload: Payload) -> Frame {
        self.out_seq += 1;
        Frame::new(self.out_seq, ts, agent, payload)
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    fn wants(&self, agent: &str, class: RelationshipClass) -> bool {
        self.subscriptions.iter().any(|s| s.matches(agent, class))
    }
}

/// A state change the hub publishes to scene clients.
#[derive(Debug, Clone, PartialEq)]
pub struct HubEvent {
    pub agent: String,
    pub var: String,
    pub value: Value,
    pub origin: Origin,
    pub hub_ts: Timestamp,
    pub class: RelationshipClass,
    pub source: String,
}

/// What the hub needs from its state owner to serve clients.
pub trait HubBackend {
    fn has_agent(&self, agent: &str) -> bool;

    /// Queues a client-originated update; the hub stamps it on receipt.
    fn client_update(&mut self, session: &str, agent: &str, var: &str, value: Value) -> Result<(), WireError>;

    /// Current hub time, used as the advisory `ts` of hub frames.
    fn now(&self) -> Timestamp;
}

/// All sessions of a hub and their subscriptions.
#[derive(Debug, Default)]
pub struct SessionHub {
    sessions: BTreeMap<SessionId, Session>,
    next_id: SessionId,
}

impl SessionHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&mut self) -> SessionId {
        self.next_id += 1;
        let id = self.next_id;
        self.sessions.insert(id, Session::new(id));
        id
    }

    pub fn disconnect(&mut self, id: SessionId) {
        self.sessions.remove(&id);
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Handles raw inbound bytes of a session and returns the reply frames
    /// for that session. Errors never close the session.
    pub fn handle(&mut self, id: SessionId, bytes: &[u8], backend: &mut dyn HubBackend) -> Vec<Frame> {
        let now = backend.now();
        let Some(session) = self.sessions.get_mut(&id) else {
            return Vec::new();
        };
        let result = session.receive(bytes).and_then(|frame| dispatch(session, frame, backend));
        match result {
            Ok(replies) => replies,
            Err(e) => vec![session.outbound(
                now,
                None,
                Payload::Error(ErrorPayload {
                    code: e.code,
                    message: e.message,
                }),
            )],
        }
    }

    /// Fans events out to every matching session, in hub timestamp order.
    pub fn publish(&mut self, events: &[HubEvent]) -> Vec<(SessionId, Frame)> {
        let mut ordered: Vec<&HubEvent> = events.iter().collect();
        ordered.sort_by_key(|e| e.hub_ts);
        let mut out = Vec::new();
        for e in ordered {
            for session in self.sessions.values_mut() {
                if !session.has_hello() || !session.wants(&e.agent, e.class) {
                    continue;
                }
                debug_assert!(e.hub_ts >= session.last_event_ts, "events published out of order");
                session.last_event_ts = e.hub_ts;
                let frame = session.outbound(
                    e.hub_ts,
                    Some(e.agent.clone()),
                    Payload::Event(EventPayload {
                        var: e.var.clone(),
                        value: e.value,
                        origin: e.origin,
                        hub_ts: e.hub_ts,
                        class: e.class,
                        source: e.source.clone(),
                    }),
                );
                out.push((session.id, frame));
            }
        }
        out
    }

    /// Sends a hub frame (e.g. a coherence report) to every greeted session
    /// subscribed to `agent`.
    pub fn broadcast(&mut self, ts: Timestamp, agent: &str, payload: Payload) -> Vec<(SessionId, Frame)> {
        let mut out = Vec::new();
        for session in self.sessions.values_mut() {
            if session.has_hello() && session.subscriptions.iter().any(|s| s.filter.matches(agent)) {
                let frame = session.outbound(ts, Some(agent.to_string()), payload.clone());
                out.push((session.id, frame));
            }
        }
        out
    }
}

/// Applies one decoded frame of a session.
pub fn dispatch(session: &mut Session, frame: Frame, backend: &mut dyn HubBackend) -> Result<Vec<Frame>, WireError> {
    let now = backend.now();
    let ack = |session: &mut Session, seq| session.outbound(now, None, Payload::Ack(AckPayload { ack_seq: seq }));
    match frame.payload {
        Payload::Hello(h) => {
            session.client = Some(h.client);
            Ok(vec![ack(session, frame.seq)])
        }
        Payload::Ack(_) => Ok(Vec::new()),
        _ if !session.has_hello() => Err(WireError::new(ErrorCode::NoHello, "hello required first")),
        Payload::Subscribe(s) => {
            if let AgentFilter::Agents(set) = &s.agents {
                if let Some(missing) = set.iter().find(|a| !backend.has_agent(a)) {
                    return Err(WireError::new(ErrorCode::UnknownAgent, format!("unknown agent {missing:?}")));
                }
            }
            session.subscriptions.push(Subscription {
                session: session.id,
                filter: s.agents,
                classes: s.classes,
            });
            Ok(vec![ack(session, frame.seq)])
        }
        Payload::StateUpdate(u) => {
            let agent = frame
                .agent
                .ok_or_else(|| WireError::bad("state_update requires an agent"))?;
            if !backend.has_agent(&agent) {
                return Err(WireError::new(ErrorCode::UnknownAgent, format!("unknown agent {agent:?}")));
            }
            let name = format!("session-{}", session.id);
            backend.client_update(&name, &agent, &u.var, u.value)?;
            Ok(vec![ack(session, frame.seq)])
        }
        other => Err(WireError::new(
            ErrorCode::Unsupported,
            format!("clients may not send {}", other.frame_type()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vector3;

    #[derive(Default)]
    struct Backend {
        updates: Vec<(String, String, Value)>,
    }

    impl HubBackend for Backend {
        fn has_agent(&self, agent: &str) -> bool {
            agent == "lamp" || agent == "rocket"
        }

        fn client_update(&mut self, _s: &str, agent: &str, var: &str, value: Value) -> Result<(), WireError> {
            if var != "power" && var != "pos" {
                return Err(WireError::new(ErrorCode::UnknownVar, var));
            }
            self.updates.push((agent.into(), var.into(), value));
            Ok(())
        }

        fn now(&self) -> Timestamp {
            Timestamp(7)
        }
    }

    fn hello(seq: u64) -> String {
        encode_frame(&Frame::new(
            seq,
            Timestamp(0),
            None,
            Payload::Hello(HelloPayload { client: "ui".into() }),
        ))
        .unwrap()
    }

    fn state_update(seq: u64, agent: &str) -> String {
        encode_frame(&Frame::new(
            seq,
            Timestamp(0),
            Some(agent.into()),
            Payload::StateUpdate(StateUpdatePayload {
                var: "power".into(),
                value: Value::Bool(true),
            }),
        ))
        .unwrap()
    }

    fn error_code(frames: &[Frame]) -> Option<ErrorCode> {
        match frames.first().map(|f| &f.payload) {
            Some(Payload::Error(e)) => Some(e.code),
            _ => None,
        }
    }

    #[test]
    fn minimal_hello_layout() {
        assert_eq!(
            hello(1),
            r#"{"v":1,"type":"hello","seq":1,"ts":0,"agent":null,"payload":{"client":"ui"}}"#
        );
    }

    #[test]
    fn truncated_is_bad_frame() {
        let text = hello(1);
        let err = decode_frame(&text.as_bytes()[..text.len() - 3]).unwrap_err();
        assert_eq!(err.code, ErrorCode::BadFrame);
    }

    #[test]
    fn unknown_keys_and_types_rejected() {
        let extra = r#"{"v":1,"type":"hello","seq":1,"ts":0,"agent":null,"payload":{"client":"ui"},"x":1}"#;
        assert_eq!(decode_frame(extra.as_bytes()).unwrap_err().code, ErrorCode::BadFrame);
        let unknown = r#"{"v":1,"type":"dance","seq":1,"ts":0,"agent":null,"payload":{}}"#;
        assert_eq!(decode_frame(unknown.as_bytes()).unwrap_err().code, ErrorCode::UnknownType);
        assert!("dance".parse::<FrameType>().is_err());
        let v2 = r#"{"v":2,"type":"ack","seq":1,"ts":0,"agent":null,"payload":{"ack_seq":1}}"#;
        assert_eq!(decode_frame(v2.as_bytes()).unwrap_err().code, ErrorCode::BadVersion);
    }

    #[test]
    fn encode_rejects_invalid() {
        let mut f = Frame::new(1, Timestamp(0), None, Payload::Ack(AckPayload { ack_seq: 1 }));
        f.v = 3;
        assert!(encode_frame(&f).is_err());
        let f = Frame::new(
            1,
            Timestamp(0),
            Some("lamp".into()),
            Payload::StateUpdate(StateUpdatePayload {
                var: "".into(),
                value: Value::Bool(true),
            }),
        );
        assert!(encode_frame(&f).is_err());
    }

    #[test]
    fn replayed_seq_is_stale() {
        let mut s = Session::new(1);
        s.receive(hello(5).as_bytes()).unwrap();
        let err = s.receive(hello(5).as_bytes()).unwrap_err();
        assert_eq!(err.code, ErrorCode::StaleSeq);
        s.receive(hello(6).as_bytes()).unwrap();
    }

    #[test]
    fn state_update_before_hello() {
        let mut hub = SessionHub::new();
        let mut b = Backend::default();
        let id = hub.connect();
        let r = hub.handle(id, state_update(1, "lamp").as_bytes(), &mut b);
        assert_eq!(error_code(&r), Some(ErrorCode::NoHello));
        assert!(b.updates.is_empty());
    }

    #[test]
    fn state_update_ingested_once() {
        let mut hub = SessionHub::new();
        let mut b = Backend::default();
        let id = hub.connect();
        hub.handle(id, hello(1).as_bytes(), &mut b);
        let r = hub.handle(id, state_update(2, "lamp").as_bytes(), &mut b);
        assert!(matches!(r[0].payload, Payload::Ack(AckPayload { ack_seq: 2 })));
        assert_eq!(b.updates, vec![("lamp".into(), "power".into(), Value::Bool(true))]);
    }

    #[test]
    fn unknown_agent_keeps_session_open() {
        let mut hub = SessionHub::new();
        let mut b = Backend::default();
        let id = hub.connect();
        hub.handle(id, hello(1).as_bytes(), &mut b);
        let r = hub.handle(id, state_update(2, "toaster").as_bytes(), &mut b);
        assert_eq!(error_code(&r), Some(ErrorCode::UnknownAgent));
        let r = hub.handle(id, state_update(3, "lamp").as_bytes(), &mut b);
        assert!(matches!(r[0].payload, Payload::Ack(_)));
    }

    #[test]
    fn wildcard_and_filtered_fanout() {
        let mut hub = SessionHub::new();
        let mut b = Backend::default();
        let all = hub.connect();
        let lamp_only = hub.connect();
        let silent = hub.connect();
        for id in [all, lamp_only, silent] {
            hub.handle(id, hello(1).as_bytes(), &mut b);
        }
        let sub = |agents: AgentFilter, classes: BTreeSet<RelationshipClass>| {
            encode_frame(&Frame::new(
                2,
                Timestamp(0),
                None,
                Payload::Subscribe(SubscribePayload { agents, classes }),
            ))
            .unwrap()
        };
        hub.handle(all, sub(AgentFilter::Wildcard, BTreeSet::new()).as_bytes(), &mut b);
        hub.handle(
            lamp_only,
            sub(
                AgentFilter::Agents(BTreeSet::from(["lamp".to_string()])),
                BTreeSet::from([RelationshipClass::EnvironmentToHuman]),
            )
            .as_bytes(),
            &mut b,
        );
        let ev = |agent: &str, ts, class| HubEvent {
            agent: agent.into(),
            var: "pos".into(),
            value: Value::Position(Vector3::ZERO),
            origin: Origin::Virtual,
            hub_ts: Timestamp(ts),
            class,
            source: "x".into(),
        };
        let out = hub.publish(&[
            ev("rocket", 20, RelationshipClass::HumanToHuman),
            ev("lamp", 10, RelationshipClass::EnvironmentToHuman),
        ]);
        let to = |id| out.iter().filter(|(s, _)| *s == id).map(|(_, f)| f.ts.0).collect::<Vec<_>>();
        assert_eq!(to(all), vec![10, 20]);
        assert_eq!(to(lamp_only), vec![10]);
        assert!(to(silent).is_empty());
    }
}
