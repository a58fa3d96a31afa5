//! The agent controller: reconciles virtual and physical updates per sync
//! link, emits the commands that re-converge the two sides, and keeps the
//! sampled history used for coherence ("noise") reports.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    hsb_to_rgb, rgb_to_hsb, Origin, SyncLink, Timestamp, Transform, Value, ValueKind, VarMapping,
    VersionedValue,
};

/// Scalar and position tolerance (absolute).
pub const SCALAR_TOLERANCE: f64 = 1e-6;
/// Per-channel color tolerance after the link transform.
pub const COLOR_TOLERANCE: f64 = 1.0 / 254.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("type mismatch: expected {expected}, found {found}")]
    TypeMismatch { expected: ValueKind, found: ValueKind },
    #[error("unknown link {0:?}")]
    UnknownLink(String),
    #[error("link {link:?} has no mapping for {origin} var {var:?}")]
    UnmappedVar {
        link: String,
        var: String,
        origin: &'static str,
    },
    #[error("link {0:?} already registered")]
    DuplicateLink(String),
    #[error("invalid value for {0:?}")]
    InvalidValue(String),
    #[error("empty coherence window")]
    EmptyWindow,
    #[error("unknown event source {0:?}")]
    UnknownSource(String),
}

fn order_key(v: &VersionedValue) -> ((Timestamp, u8, u64), (u8, [u64; 3])) {
    (v.version_key(), v.value.tie_key())
}

/// Picks the winning version: later hub timestamp, then physical over
/// virtual, then higher sequence number.
pub fn reconcile(a: &VersionedValue, b: &VersionedValue) -> Result<VersionedValue, SyncError> {
    if a.value.kind() != b.value.kind() {
        return Err(SyncError::TypeMismatch {
            expected: a.value.kind(),
            found: b.value.kind(),
        });
    }
    Ok(if order_key(b) > order_key(a) { *b } else { *a })
}

/// Tolerance-aware comparison of a virtual value and a physical value
/// across a mapping transform.
pub fn values_agree(a: &Value, b: &Value, transform: Transform) -> bool {
    match (a, b) {
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Scalar(x), Value::Scalar(y)) => (x - y).abs() <= SCALAR_TOLERANCE,
        (Value::Position(p), Value::Position(q)) => {
            (p.x - q.x).abs() <= SCALAR_TOLERANCE
                && (p.y - q.y).abs() <= SCALAR_TOLERANCE
                && (p.z - q.z).abs() <= SCALAR_TOLERANCE
        }
        (Value::Color(x), Value::Color(y)) => {
            let (x, y) = match transform {
                Transform::Identity => (*x, *y),
                Transform::RgbToHsb => (hsb_to_rgb(rgb_to_hsb(*x)), hsb_to_rgb(rgb_to_hsb(*y))),
            };
            x.max_channel_diff(&y) <= COLOR_TOLERANCE + 1e-9
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandTarget {
    Device,
    SceneClients,
}

impl CommandTarget {
    pub fn side(self) -> Origin {
        match self {
            CommandTarget::Device => Origin::Physical,
            CommandTarget::SceneClients => Origin::Virtual,
        }
    }

    fn for_side(side: Origin) -> Self {
        match side {
            Origin::Physical => CommandTarget::Device,
            Origin::Virtual => CommandTarget::SceneClients,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CommandTarget::Device => "device",
            CommandTarget::SceneClients => "scene_clients",
        }
    }
}

/// An update entering the controller. `value.ts` is already hub-stamped.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEvent {
    pub link_id: String,
    pub var: String,
    pub value: VersionedValue,
}

/// Instruction to bring one side of a link to the reconciled value.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub id: u64,
    pub link_id: String,
    pub target: CommandTarget,
    /// Device id for device commands, agent id for scene broadcasts.
    pub scope: String,
    /// Variable name on the target side.
    pub var: String,
    /// Value in the virtual domain; device adapters apply the transform.
    pub value: Value,
    pub transform: Transform,
}

const SIDES: [Origin; 2] = [Origin::Virtual, Origin::Physical];

fn idx(side: Origin) -> usize {
    match side {
        Origin::Virtual => 0,
        Origin::Physical => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MappingState {
    mapping: VarMapping,
    kind: ValueKind,
    winner: VersionedValue,
    last_seq: [Option<u64>; 2],
    seen: [Option<Value>; 2],
    in_flight: [Option<(u64, Value)>; 2],
}

/// Reconciliation state of one link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    link: SyncLink,
    agent_scope: String,
    mappings: Vec<MappingState>,
}

impl LinkState {
    /// `initial` holds the virtual variable values the link starts from.
    pub fn new(link: SyncLink, initial: &BTreeMap<String, Value>) -> Result<Self, SyncError> {
        let mut mappings = Vec::with_capacity(link.mappings.len());
        for m in &link.mappings {
            let value = *initial.get(&m.virtual_var).ok_or_else(|| SyncError::UnmappedVar {
                link: link.id.clone(),
                var: m.virtual_var.clone(),
                origin: Origin::Virtual.as_str(),
            })?;
            let winner = VersionedValue::new(value, Timestamp(0), Origin::Virtual, 0);
            mappings.push(MappingState {
                mapping: m.clone(),
                kind: value.kind(),
                winner,
                last_seq: [Some(0), None],
                seen: [Some(value), None],
                in_flight: [None, None],
            });
        }
        Ok(Self {
            agent_scope: link.agent_id.clone(),
            link,
            mappings,
        })
    }

    pub fn link(&self) -> &SyncLink {
        &self.link
    }

    /// Current reconciled version of a mapping, by virtual variable name.
    pub fn winner(&self, virtual_var: &str) -> Option<&VersionedValue> {
        self.mappings
            .iter()
            .find(|m| m.mapping.virtual_var == virtual_var)
            .map(|m| &m.winner)
    }

    /// Last value the hub knows a side holds for a mapping.
    pub fn seen(&self, virtual_var: &str, side: Origin) -> Option<Value> {
        self.mappings
            .iter()
            .find(|m| m.mapping.virtual_var == virtual_var)
            .and_then(|m| m.seen[idx(side)])
    }

    /// Whether the hub believes both sides of every mapping agree.
    pub fn believed_coherent(&self) -> bool {
        self.mappings.iter().all(|m| match (m.seen[0], m.seen[1]) {
            (Some(v), Some(p)) => values_agree(&v, &p, m.mapping.transform),
            _ => false,
        })
    }

    fn sink_allowed(&self, side: Origin) -> bool {
        self.link.mode.propagates_from(side.opposite())
    }

    fn converge(&mut self, mi: usize, next_id: &mut u64, out: &mut Vec<Command>) {
        let mode_sinks: Vec<Origin> = SIDES.into_iter().filter(|s| self.sink_allowed(*s)).collect();
        let m = &mut self.mappings[mi];
        for side in mode_sinks {
            let i = idx(side);
            let target = m.winner.value;
            let tf = m.mapping.transform;
            let agrees = m.seen[i].is_some_and(|v| values_agree(&target, &v, tf));
            let pending = m.in_flight[i].is_some_and(|(_, v)| values_agree(&target, &v, tf));
            if agrees || pending {
                continue;
            }
            let id = *next_id;
            *next_id += 1;
            m.in_flight[i] = Some((id, target));
            let (scope, var) = match side {
                Origin::Physical => (self.link.device_id.clone(), m.mapping.physical_var.clone()),
                Origin::Virtual => (self.agent_scope.clone(), m.mapping.virtual_var.clone()),
            };
            out.push(Command {
                id,
                link_id: self.link.id.clone(),
                target: CommandTarget::for_side(side),
                scope,
                var,
                value: target,
                transform: tf,
            });
        }
    }

    /// Applies one update. Returns the commands needed to re-converge.
    ///
    /// Duplicates (sequence already seen on that stream) and stale versions
    /// (older than the current winner) are dropped without effect.
    pub fn ingest(&mut self, e: &UpdateEvent, next_id: &mut u64) -> Result<Vec<Command>, SyncError> {
        let origin = e.value.origin;
        let (mi, _) = self
            .link
            .mapping_for(&e.var, origin)
            .ok_or_else(|| SyncError::UnmappedVar {
                link: self.link.id.clone(),
                var: e.var.clone(),
                origin: origin.as_str(),
            })?;
        if !e.value.value.is_valid() {
            return Err(SyncError::InvalidValue(e.var.clone()));
        }
        let ms = &mut self.mappings[mi];
        if e.value.value.kind() != ms.kind {
            return Err(SyncError::TypeMismatch {
                expected: ms.kind,
                found: e.value.value.kind(),
            });
        }
        let i = idx(origin);
        if ms.last_seq[i].is_some_and(|last| e.value.seq <= last) {
            return Ok(Vec::new());
        }
        ms.last_seq[i] = Some(e.value.seq);
        if e.value.ts < ms.winner.ts {
            return Ok(Vec::new());
        }
        ms.seen[i] = Some(e.value.value);
        if self.link.mode.propagates_from(origin) {
            ms.winner = reconcile(&ms.winner, &e.value)?;
        }
        let mut out = Vec::new();
        self.converge(mi, next_id, &mut out);
        Ok(out)
    }

    /// Records the delivery outcome of a command. A successful delivery
    /// whose value no longer matches the winner triggers one correction.
    pub fn ack(
        &mut self,
        command_id: u64,
        side: Origin,
        var: &str,
        applied: Option<Value>,
        next_id: &mut u64,
    ) -> Result<Vec<Command>, SyncError> {
        let (mi, _) = self
            .link
            .mapping_for(var, side)
            .ok_or_else(|| SyncError::UnmappedVar {
                link: self.link.id.clone(),
                var: var.to_string(),
                origin: side.as_str(),
            })?;
        let i = idx(side);
        let ms = &mut self.mappings[mi];
        let current = ms.in_flight[i].is_some_and(|(id, _)| id == command_id);
        if let Some(v) = applied {
            ms.seen[i] = Some(v);
        }
        let mut out = Vec::new();
        if current {
            ms.in_flight[i] = None;
            if applied.is_some() {
                self.converge(mi, next_id, &mut out);
            }
        }
        Ok(out)
    }

    /// Re-issues commands for sides that disagree with the winner and have
    /// nothing in flight (e.g. after a failed delivery).
    pub fn resync(&mut self, next_id: &mut u64) -> Vec<Command> {
        let mut out = Vec::new();
        for mi in 0..self.mappings.len() {
            self.converge(mi, next_id, &mut out);
        }
        out
    }

    /// Forgets what the hub believed a side holds, e.g. after a device restart.
    pub fn invalidate(&mut self, side: Origin) {
        for m in &mut self.mappings {
            m.seen[idx(side)] = None;
        }
    }
}

/// All links of a hub, keyed by link id.
#[derive(Debug, Clone, Default)]
pub struct SyncEngine {
    links: BTreeMap<String, LinkState>,
    next_command: u64,
}

impl SyncEngine {
    pub fn new() -> Self {
        Self {
            links: BTreeMap::new(),
            next_command: 1,
        }
    }

    pub fn register(&mut self, link: SyncLink, initial: &BTreeMap<String, Value>) -> Result<(), SyncError> {
        if self.links.contains_key(&link.id) {
            return Err(SyncError::DuplicateLink(link.id));
        }
        let state = LinkState::new(link, initial)?;
        self.links.insert(state.link.id.clone(), state);
        Ok(())
    }

    pub fn link(&self, id: &str) -> Option<&LinkState> {
        self.links.get(id)
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkState> {
        self.links.values()
    }

    /// Links whose virtual side includes `var` of `agent`.
    pub fn links_for_virtual(&self, agent: &str, var: &str) -> Vec<String> {
        self.links
            .values()
            .filter(|l| l.link.agent_id == agent && l.link.mapping_for(var, Origin::Virtual).is_some())
            .map(|l| l.link.id.clone())
            .collect()
    }

    /// Links whose physical side includes `var` of `device`.
    pub fn links_for_physical(&self, device: &str, var: &str) -> Vec<String> {
        self.links
            .values()
            .filter(|l| l.link.device_id == device && l.link.mapping_for(var, Origin::Physical).is_some())
            .map(|l| l.link.id.clone())
            .collect()
    }

    pub fn ingest_update(&mut self, e: &UpdateEvent) -> Result<Vec<Command>, SyncError> {
        let state = self
            .links
            .get_mut(&e.link_id)
            .ok_or_else(|| SyncError::UnknownLink(e.link_id.clone()))?;
        state.ingest(e, &mut self.next_command)
    }

    /// See [`LinkState::ack`]. `applied` is `None` when delivery failed.
    pub fn ack(&mut self, cmd: &Command, applied: Option<Value>) -> Result<Vec<Command>, SyncError> {
        let state = self
            .links
            .get_mut(&cmd.link_id)
            .ok_or_else(|| SyncError::UnknownLink(cmd.link_id.clone()))?;
        state.ack(cmd.id, cmd.target.side(), &cmd.var, applied, &mut self.next_command)
    }

    pub fn resync(&mut self) -> Vec<Command> {
        let mut out = Vec::new();
        for state in self.links.values_mut() {
            out.extend(state.resync(&mut self.next_command));
        }
        out
    }

    pub fn invalidate_device(&mut self, device: &str) {
        for state in self.links.values_mut() {
            if state.link.device_id == device {
                state.invalidate(Origin::Physical);
            }
        }
    }
}

/// Divergence summary of one link over a time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub link_id: String,
    pub window: (Timestamp, Timestamp),
    pub incoherent_spans: Vec<(Timestamp, Timestamp)>,
    pub noise_score: f64,
}

impl CoherenceReport {
    pub fn incoherent_ms(&self) -> u64 {
        self.incoherent_spans.iter().map(|(s, e)| e.0 - s.0).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub ts: Timestamp,
    pub diverged: bool,
}

/// Per-tick divergence samples of every link.
#[derive(Debug, Clone)]
pub struct CoherenceMonitor {
    tick_ms: u64,
    grace_ms: u64,
    capacity: usize,
    history: BTreeMap<String, VecDeque<Sample>>,
}

impl CoherenceMonitor {
    pub fn new(tick_ms: u64, grace_ms: u64) -> Self {
        Self {
            tick_ms: tick_ms.max(1),
            grace_ms,
            capacity: usize::MAX,
            history: BTreeMap::new(),
        }
    }

    /// Keeps at most `capacity` samples per link.
    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity.max(1);
        self
    }

    pub fn tick_ms(&self) -> u64 {
        self.tick_ms
    }

    pub fn grace_ms(&self) -> u64 {
        self.grace_ms
    }

    pub fn set_grace_ms(&mut self, grace_ms: u64) {
        self.grace_ms = grace_ms;
    }

    pub fn record(&mut self, link_id: &str, ts: Timestamp, diverged: bool) {
        let h = self.history.entry(link_id.to_string()).or_default();
        h.push_back(Sample { ts, diverged });
        while h.len() > self.capacity {
            h.pop_front();
        }
    }

    pub fn samples(&self, link_id: &str) -> impl Iterator<Item = &Sample> {
        self.history.get(link_id).into_iter().flatten()
    }

    pub fn link_ids(&self) -> impl Iterator<Item = &String> {
        self.history.keys()
    }

    /// Whether the sample at `ts` on `link_id` counts as incoherent once the
    /// grace period is applied.
    pub fn is_incoherent_at(&self, link_id: &str, ts: Timestamp) -> bool {
        let mut run_start: Option<u64> = None;
        let mut prev: Option<u64> = None;
        for s in self.samples(link_id) {
            if s.ts.0 > ts.0 {
                break;
            }
            run_start = next_run_start(run_start, prev, s, self.tick_ms);
            prev = Some(s.ts.0);
            if s.ts == ts {
                return run_start.is_some_and(|start| s.ts.0 + self.tick_ms - start > self.grace_ms);
            }
        }
        false
    }

    /// Incoherent spans and noise score of one link over `[start, end)`.
    pub fn coherence_check(
        &self,
        link_id: &str,
        window: (Timestamp, Timestamp),
    ) -> Result<CoherenceReport, SyncError> {
        let (start, end) = (window.0 .0, window.1 .0);
        if end <= start {
            return Err(SyncError::EmptyWindow);
        }
        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut run_start: Option<u64> = None;
        let mut prev: Option<u64> = None;
        for s in self.samples(link_id) {
            run_start = next_run_start(run_start, prev, s, self.tick_ms);
            prev = Some(s.ts.0);
            let Some(rs) = run_start else { continue };
            let sample_end = s.ts.0 + self.tick_ms;
            if sample_end - rs <= self.grace_ms {
                continue;
            }
            let lo = s.ts.0.max(start);
            let hi = sample_end.min(end);
            if lo >= hi {
                continue;
            }
            match spans.last_mut() {
                Some(last) if last.1 == lo => last.1 = hi,
                _ => spans.push((lo, hi)),
            }
        }
        let total: u64 = spans.iter().map(|(a, b)| b - a).sum();
        Ok(CoherenceReport {
            link_id: link_id.to_string(),
            window: (window.0, window.1),
            incoherent_spans: spans
                .into_iter()
                .map(|(a, b)| (Timestamp(a), Timestamp(b)))
                .collect(),
            noise_score: total as f64 / (end - start) as f64,
        })
    }
}

fn next_run_start(run_start: Option<u64>, prev: Option<u64>, s: &Sample, tick_ms: u64) -> Option<u64> {
    if !s.diverged {
        return None;
    }
    let contiguous = prev.is_some_and(|p| s.ts.0 <= p + tick_ms);
    match run_start {
        Some(rs) if contiguous => Some(rs),
        _ => Some(s.ts.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationshipClass {
    HumanToHuman,
    EnvironmentToHuman,
    ObjectAgentToObjectAgent,
}

impl RelationshipClass {
    pub const ALL: [RelationshipClass; 3] = [
        RelationshipClass::HumanToHuman,
        RelationshipClass::EnvironmentToHuman,
        RelationshipClass::ObjectAgentToObjectAgent,
    ];
}

impl fmt::Display for RelationshipClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationshipClass::HumanToHuman => "human_to_human",
            RelationshipClass::EnvironmentToHuman => "environment_to_human",
            RelationshipClass::ObjectAgentToObjectAgent => "object_agent_to_object_agent",
        })
    }
}

/// Where a bus event came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EventSource {
    /// A scene client session operated by a person.
    Human(String),
    /// A device or environment sensor.
    Device(String),
    /// An agent rule inside the hub (scenario triggers, propagation).
    Agent(String),
}

/// Known event sources of a hub.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub humans: BTreeSet<String>,
    pub devices: BTreeSet<String>,
    pub agents: BTreeSet<String>,
}

pub fn classify_event(source: &EventSource, topology: &Topology) -> Result<RelationshipClass, SyncError> {
    let (known, class, id) = match source {
        EventSource::Human(id) => (&topology.humans, RelationshipClass::HumanToHuman, id),
        EventSource::Device(id) => (&topology.devices, RelationshipClass::EnvironmentToHuman, id),
        EventSource::Agent(id) => (&topology.agents, RelationshipClass::ObjectAgentToObjectAgent, id),
    };
    if known.contains(id) {
        Ok(class)
    } else {
        Err(SyncError::UnknownSource(id.clone()))
    }
}
