//! The hub's simulation loop.
//!
//! Each tick runs, in order: ingest queued client updates and device
//! callbacks (stamping hub time), advance orbits, evaluate scenario
//! triggers, deliver commands, sample coherence.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::device::{
    adapter_send, DeviceDescriptor, DeviceEvent, DeviceKind, DeviceTransport, HueBridge, LocalDevices, OutageSchedule,
    SmartPlug,
};
use crate::model::{ExtendedMetaverseAgent, Origin, Timestamp, Value, Vector3, VersionedValue};
use crate::scenario::{
    lamp_transition, orbit_position, orbit_step, pick_color, propagate_ambient, socket_test, ButtonPress,
    CollisionTracker, PowerIntent, TickClock,
};
use crate::sync::{
    classify_event, values_agree, Command, CommandTarget, CoherenceMonitor, CoherenceReport, EventSource,
    RelationshipClass, SyncEngine, SyncError, Topology, UpdateEvent,
};
use crate::wire::{ErrorCode, HubBackend, HubEvent, WireError};

/// Device access for the tick loop. `observe` reports what a device really
/// holds when that is known (emulators); the hub's belief is used otherwise.
pub trait DeviceAccess: DeviceTransport {
    fn observe(&self, _desc: &DeviceDescriptor, _var: &str) -> Option<Value> {
        None
    }
}

impl DeviceAccess for LocalDevices {
    fn observe(&self, desc: &DeviceDescriptor, var: &str) -> Option<Value> {
        self.physical_value(desc, var)
    }
}

/// Emulators for every device of a scenario.
pub fn local_devices(cfg: &ScenarioConfig) -> LocalDevices {
    let mut devices = LocalDevices::new(HueBridge::new(cfg.bridge_user.clone(), cfg.bridge_lights));
    for d in &cfg.devices {
        if d.kind == DeviceKind::Plug {
            let plug = SmartPlug::new(d.id.clone(), d.key.clone().unwrap_or_default());
            devices.plugs.insert(d.id.clone(), plug);
        }
    }
    devices
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
}

/// Simulated delivery delay towards one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    Fixed(u64),
    /// Uniform in `lo..=hi` milliseconds, drawn from the world's seeded RNG.
    Uniform(u64, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogKind {
    Config,
    Update,
    Command,
    Delivery,
    Event,
    Sample,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Config => "config",
            LogKind::Update => "update",
            LogKind::Command => "command",
            LogKind::Delivery => "delivery",
            LogKind::Event => "event",
            LogKind::Sample => "sample",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "config" => LogKind::Config,
            "update" => LogKind::Update,
            "command" => LogKind::Command,
            "delivery" => LogKind::Delivery,
            "event" => LogKind::Event,
            "sample" => LogKind::Sample,
            _ => return None,
        })
    }
}

/// One row of the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub ts: Timestamp,
    pub tick: u64,
    pub kind: LogKind,
    pub link: String,
    pub scope: String,
    pub var: String,
    pub side: String,
    pub value: String,
    pub detail: String,
}

pub const LOG_HEADER: [&str; 9] = ["ts_ms", "tick", "kind", "link", "scope", "var", "side", "value", "detail"];

impl LogRecord {
    pub fn fields(&self) -> [String; 9] {
        [
            self.ts.0.to_string(),
            self.tick.to_string(),
            self.kind.as_str().to_string(),
            self.link.clone(),
            self.scope.clone(),
            self.var.clone(),
            self.side.clone(),
            self.value.clone(),
            self.detail.clone(),
        ]
    }
}

/// Writes log rows as CSV, header first.
pub fn write_log_csv<W: Write>(out: W, records: &[LogRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one coherence report per link as CSV.
pub fn write_coherence_csv<W: Write>(out: W, reports: &[CoherenceReport]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["link", "window_start_ms", "window_end_ms", "incoherent_ms", "noise_score", "spans"])?;
    for r in reports {
        let spans: Vec<String> = r
            .incoherent_spans
            .iter()
            .map(|(s, e)| format!("{}-{}", s.0, e.0))
            .collect();
        w.write_record([
            r.link_id.clone(),
            r.window.0 .0.to_string(),
            r.window.1 .0.to_string(),
            r.incoherent_ms().to_string(),
            format!("{:.6}", r.noise_score),
            spans.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
enum Inbound {
    Client {
        session: String,
        agent: String,
        var: String,
        value: Value,
    },
    Device(DeviceEvent),
}

#[derive(Debug, Clone)]
struct Pending {
    cmd: Command,
    due: Timestamp,
}

#[derive(Debug, Clone)]
struct LampRuntime {
    seated: bool,
}

#[derive(Debug, Clone)]
struct GalaxyRuntime {
    positions: Vec<Vector3>,
    tracker: CollisionTracker,
}

/// What one tick produced for scene clients.
#[derive(Debug, Clone, Default)]
pub struct TickOutput {
    pub ts: Timestamp,
    pub tick: u64,
    pub events: Vec<HubEvent>,
    pub commands: Vec<Command>,
}

/// Bound on delivery rounds per tick (a round delivers due commands and
/// collects corrections triggered by their acks).
const MAX_ROUNDS: usize = 16;

pub struct World {
    cfg: ScenarioConfig,
    clock: TickClock,
    engine: SyncEngine,
    agents: BTreeMap<String, ExtendedMetaverseAgent>,
    devices: BTreeMap<String, DeviceDescriptor>,
    monitor: CoherenceMonitor,
    topology: Topology,
    inbound: VecDeque<Inbound>,
    stream_seq: BTreeMap<(String, String, Origin), u64>,
    last_press: BTreeMap<String, u64>,
    pending: Vec<Pending>,
    latency: BTreeMap<String, Latency>,
    rng: ChaCha8Rng,
    pub hub_outages: OutageSchedule,
    lamp: Option<LampRuntime>,
    galaxy: Option<GalaxyRuntime>,
    log: Vec<LogRecord>,
    keep_samples: bool,
    out: TickOutput,
}

impl World {
    pub fn new(cfg: ScenarioConfig, seed: u64) -> Result<Self, WorldError> {
        let mut engine = SyncEngine::new();
        let mut topology = Topology::default();
        let mut agents = BTreeMap::new();
        for a in &cfg.agents {
            topology.agents.insert(a.id.clone());
            agents.insert(a.id.clone(), a.clone());
        }
        for l in &cfg.links {
            let agent = agents
                .get(&l.agent_id)
                .ok_or_else(|| WorldError::UnknownAgent(l.agent_id.clone()))?;
            let initial: BTreeMap<String, Value> = agent
                .virtual_state
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), v.value))
                .collect();
            engine.register(l.clone(), &initial)?;
        }
        let devices: BTreeMap<String, DeviceDescriptor> =
            cfg.devices.iter().map(|d| (d.id.clone(), d.clone())).collect();
        topology.devices.extend(devices.keys().cloned());
        let lamp = cfg.lamp.as_ref().map(|_| LampRuntime { seated: false });
        let galaxy = cfg.galaxy.as_ref().map(|g| GalaxyRuntime {
            positions: g.planets.iter().map(|p| p.pos).collect(),
            tracker: CollisionTracker::new(g.planets.len()),
        });
        let mut world = Self {
            clock: TickClock::new(cfg.tick_ms),
            monitor: CoherenceMonitor::new(cfg.tick_ms, cfg.grace_ms),
            engine,
            agents,
            devices,
            topology,
            inbound: VecDeque::new(),
            stream_seq: BTreeMap::new(),
            last_press: BTreeMap::new(),
            pending: Vec::new(),
            latency: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            hub_outages: OutageSchedule::default(),
            lamp,
            galaxy,
            log: Vec::new(),
            keep_samples: true,
            out: TickOutput::default(),
            cfg,
        };
        world.log_config();
        Ok(world)
    }

    fn log_config(&mut self) {
        let detail = format!("tick_ms={};grace_ms={}", self.cfg.tick_ms, self.monitor.grace_ms());
        self.push_log(LogKind::Config, "", &self.cfg.name.clone(), "", "", "", detail);
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> Timestamp {
        Timestamp(self.clock.now_ms())
    }

    pub fn clock(&self) -> TickClock {
        self.clock
    }

    pub fn engine(&self) -> &SyncEngine {
        &self.engine
    }

    pub fn agent(&self, id: &str) -> Option<&ExtendedMetaverseAgent> {
        self.agents.get(id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &ExtendedMetaverseAgent> {
        self.agents.values()
    }

    pub fn device(&self, id: &str) -> Option<&DeviceDescriptor> {
        self.devices.get(id)
    }

    pub fn monitor(&self) -> &CoherenceMonitor {
        &self.monitor
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// Drops log rows already persisted elsewhere.
    pub fn take_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.log)
    }

    /// Whether per-tick coherence samples go to the event log.
    pub fn set_log_samples(&mut self, on: bool) {
        self.keep_samples = on;
    }

    /// Changes the grace period; only affects reports, not sampling.
    pub fn set_grace_ms(&mut self, grace_ms: u64) {
        self.monitor.set_grace_ms(grace_ms);
        self.log.retain(|r| r.kind != LogKind::Config);
        let detail = format!("tick_ms={};grace_ms={grace_ms}", self.cfg.tick_ms);
        let name = self.cfg.name.clone();
        self.log.insert(
            0,
            LogRecord {
                ts: Timestamp(0),
                tick: 0,
                kind: LogKind::Config,
                link: String::new(),
                scope: name,
                var: String::new(),
                side: String::new(),
                value: String::new(),
                detail,
            },
        );
    }

    pub fn set_latency(&mut self, device: &str, latency: Latency) -> Result<(), WorldError> {
        if !self.devices.contains_key(device) {
            return Err(WorldError::UnknownDevice(device.to_string()));
        }
        self.latency.insert(device.to_string(), latency);
        Ok(())
    }

    /// Current planet positions, in configuration order.
    pub fn planet_positions(&self) -> &[Vector3] {
        self.galaxy.as_ref().map_or(&[], |g| &g.positions)
    }

    /// Closed-form planet position at an arbitrary time.
    pub fn planet_position_at(&self, index: usize, at: Timestamp) -> Option<Vector3> {
        let g = self.cfg.galaxy.as_ref()?;
        let p = g.planets.get(index)?;
        Some(orbit_position(p, g.sun_pos, at.seconds()))
    }

    pub fn coherence_report(&self, link: &str, window: (Timestamp, Timestamp)) -> Result<CoherenceReport, SyncError> {
        self.monitor.coherence_check(link, window)
    }

    pub fn coherence_reports(&self, window: (Timestamp, Timestamp)) -> Result<Vec<CoherenceReport>, SyncError> {
        self.cfg
            .links
            .iter()
            .map(|l| self.monitor.coherence_check(&l.id, window))
            .collect()
    }

    /// Accepts a device callback. Returns false while the hub is down so the
    /// device retries later.
    pub fn receive_device_event(&mut self, event: DeviceEvent) -> bool {
        if self.hub_outages.is_down(self.now()) {
            return false;
        }
        if !self.devices.contains_key(&event.device) {
            // Nothing will ever accept it; drop rather than block the device.
            return true;
        }
        self.inbound.push_back(Inbound::Device(event));
        true
    }

    fn next_seq(&mut self, scope: &str, var: &str, origin: Origin) -> u64 {
        let seq = self
            .stream_seq
            .entry((scope.to_string(), var.to_string(), origin))
            .or_insert(0);
        *seq += 1;
        *seq
    }

    fn stamp(&mut self, scope: &str, var: &str, origin: Origin, value: Value) -> VersionedValue {
        let seq = self.next_seq(scope, var, origin);
        VersionedValue::new(value, self.now(), origin, seq)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_log(
        &mut self,
        kind: LogKind,
        link: &str,
        scope: &str,
        var: &str,
        side: &str,
        value: &str,
        detail: String,
    ) {
        self.log.push(LogRecord {
            ts: self.now(),
            tick: self.clock.tick,
            kind,
            link: link.to_string(),
            scope: scope.to_string(),
            var: var.to_string(),
            side: side.to_string(),
            value: value.to_string(),
            detail,
        });
    }

    fn publish(&mut self, agent: &str, var: &str, value: Value, origin: Origin, source: EventSource) {
        let class = match classify_event(&source, &self.topology) {
            Ok(c) => c,
            Err(_) => RelationshipClass::HumanToHuman,
        };
        let source = match source {
            EventSource::Human(s) | EventSource::Device(s) | EventSource::Agent(s) => s,
        };
        self.push_log(LogKind::Event, "", agent, var, origin.as_str(), &value.to_json(), class.to_string());
        self.out.events.push(HubEvent {
            agent: agent.to_string(),
            var: var.to_string(),
            value,
            origin,
            hub_ts: self.now(),
            class,
            source,
        });
    }

    fn queue(&mut self, cmds: Vec<Command>) {
        for cmd in cmds {
            let delay = match cmd.target {
                CommandTarget::Device => match self.latency.get(&cmd.scope) {
                    Some(Latency::Fixed(ms)) => *ms,
                    Some(Latency::Uniform(lo, hi)) => self.rng.gen_range(*lo..=*hi),
                    None => 0,
                },
                CommandTarget::SceneClients => 0,
            };
            self.push_log(
                LogKind::Command,
                &cmd.link_id,
                &cmd.scope,
                &cmd.var,
                cmd.target.as_str(),
                &cmd.value.to_json(),
                format!("id={}", cmd.id),
            );
            self.out.commands.push(cmd.clone());
            let due = Timestamp(self.now().0 + delay);
            self.pending.push(Pending { cmd, due });
        }
    }

    /// Sets a virtual variable and feeds it to every link that maps it.
    fn virtual_update(&mut self, agent: &str, var: &str, value: Value, source: EventSource) -> Result<(), WorldError> {
        let vv = self.stamp(agent, var, Origin::Virtual, value);
        let a = self
            .agents
            .get_mut(agent)
            .ok_or_else(|| WorldError::UnknownAgent(agent.to_string()))?;
        a.virtual_state.set(var, vv);
        self.publish(agent, var, value, Origin::Virtual, source);
        for link in self.engine.links_for_virtual(agent, var) {
            let cmds = self.engine.ingest_update(&UpdateEvent {
                link_id: link.clone(),
                var: var.to_string(),
                value: vv,
            })?;
            self.push_log(
                LogKind::Update,
                &link,
                agent,
                var,
                "virtual",
                &value.to_json(),
                format!("seq={};commands={}", vv.seq, cmds.len()),
            );
            self.queue(cmds);
        }
        Ok(())
    }

    fn physical_update(&mut self, device: &str, var: &str, value: Value) -> Result<(), WorldError> {
        let vv = self.stamp(device, var, Origin::Physical, value);
        for link in self.engine.links_for_physical(device, var) {
            let cmds = self.engine.ingest_update(&UpdateEvent {
                link_id: link.clone(),
                var: var.to_string(),
                value: vv,
            })?;
            self.push_log(
                LogKind::Update,
                &link,
                device,
                var,
                "physical",
                &value.to_json(),
                format!("seq={};commands={}", vv.seq, cmds.len()),
            );
            self.queue(cmds);
        }
        let agents: Vec<String> = self
            .cfg
            .links
            .iter()
            .filter(|l| l.device_id == device)
            .map(|l| l.agent_id.clone())
            .collect();
        for agent in agents {
            self.publish(
                &agent,
                &format!("{device}/{var}"),
                value,
                Origin::Physical,
                EventSource::Device(device.to_string()),
            );
        }
        Ok(())
    }

    /// Runs one tick against `devices` and advances the clock.
    pub fn run_tick(&mut self, devices: &mut dyn DeviceAccess) -> Result<TickOutput, WorldError> {
        self.out = TickOutput {
            ts: self.now(),
            tick: self.clock.tick,
            ..TickOutput::default()
        };

        // 1. ingest
        let mut presses = Vec::new();
        let lamp_plug = self.cfg.lamp.as_ref().map(|l| l.plug.clone());
        while let Some(item) = self.inbound.pop_front() {
            match item {
                Inbound::Client {
                    session,
                    agent,
                    var,
                    value,
                } => {
                    self.topology.humans.insert(session.clone());
                    self.virtual_update(&agent, &var, value, EventSource::Human(session))?;
                }
                Inbound::Device(ev) => {
                    let last = self.last_press.get(&ev.device).copied().unwrap_or(0);
                    if ev.press_seq <= last {
                        self.push_log(
                            LogKind::Update,
                            "",
                            &ev.device,
                            &ev.var,
                            "physical",
                            &ev.value.to_json(),
                            format!("duplicate press_seq={}", ev.press_seq),
                        );
                        continue;
                    }
                    self.last_press.insert(ev.device.clone(), ev.press_seq);
                    match (lamp_plug.as_deref() == Some(ev.device.as_str()), ev.value) {
                        (true, Value::Bool(on)) if ev.var == "power" => presses.push(ButtonPress {
                            press_seq: ev.press_seq,
                            on,
                        }),
                        _ => self.physical_update(&ev.device, &ev.var, ev.value)?,
                    }
                }
            }
        }

        // 2. orbits
        let dt = self.clock.dt_seconds();
        if let (Some(g), Some(rt)) = (self.cfg.galaxy.as_ref(), self.galaxy.as_mut()) {
            if self.clock.tick > 0 {
                orbit_step(&mut rt.positions, &g.planets, g.sun_pos, dt);
            }
        }

        // 3. triggers
        self.lamp_rules(&presses)?;
        self.galaxy_rules()?;

        // 4. delivery
        let retries = self.engine.resync();
        self.queue(retries);
        self.deliver(devices)?;

        // 5. coherence
        self.sample(devices);

        self.clock.advance();
        Ok(std::mem::take(&mut self.out))
    }

    fn lamp_rules(&mut self, presses: &[ButtonPress]) -> Result<(), WorldError> {
        let Some(cfg) = self.cfg.lamp.clone() else {
            return Ok(());
        };
        let bulb = self
            .agents
            .get(&cfg.agent)
            .and_then(|a| a.virtual_state.value(&cfg.bulb_var))
            .and_then(|v| v.as_position())
            .ok_or_else(|| WorldError::UnknownAgent(cfg.agent.clone()))?;
        let seated = socket_test(bulb, cfg.socket_pos, cfg.socket_radius);
        let rt = self.lamp.as_mut().expect("lamp runtime");
        let prev = rt.seated;
        rt.seated = seated;
        for intent in lamp_transition(prev, seated, presses) {
            match intent {
                PowerIntent::Seat(on) => self.virtual_update(
                    &cfg.agent,
                    &cfg.power_var,
                    Value::Bool(on),
                    EventSource::Agent(cfg.agent.clone()),
                )?,
                PowerIntent::Button(p) => self.physical_update(&cfg.plug, "power", Value::Bool(p.on))?,
            }
        }
        Ok(())
    }

    fn galaxy_rules(&mut self) -> Result<(), WorldError> {
        let Some(cfg) = self.cfg.galaxy.clone() else {
            return Ok(());
        };
        let rocket = self
            .agents
            .get(&cfg.rocket.agent)
            .and_then(|a| a.virtual_state.value(&cfg.rocket.pos_var))
            .and_then(|v| v.as_position())
            .ok_or_else(|| WorldError::UnknownAgent(cfg.rocket.agent.clone()))?;
        let rt = self.galaxy.as_mut().expect("galaxy runtime");
        let Some(i) = rt.tracker.update(rocket, cfg.rocket.radius, &cfg.planets, &rt.positions) else {
            return Ok(());
        };
        let color = Value::Color(pick_color(&cfg.planets[i]));
        let agent = cfg.rocket.agent.clone();
        let var = cfg.rocket.color_var.clone();
        let vv = self.stamp(&agent, &var, Origin::Virtual, color);
        if let Some(a) = self.agents.get_mut(&agent) {
            a.virtual_state.set(&var, vv);
        }
        self.publish(&agent, &var, color, Origin::Virtual, EventSource::Agent(agent.clone()));
        for link in &cfg.ambient_links {
            let cmds = propagate_ambient(&mut self.engine, &var, vv, std::slice::from_ref(link))?;
            self.push_log(
                LogKind::Update,
                link,
                &agent,
                &var,
                "virtual",
                &color.to_json(),
                format!("seq={};planet={};commands={}", vv.seq, cfg.planets[i].name, cmds.len()),
            );
            self.queue(cmds);
        }
        Ok(())
    }

    fn deliver(&mut self, devices: &mut dyn DeviceAccess) -> Result<(), WorldError> {
        let now = self.now();
        for _ in 0..MAX_ROUNDS {
            let (due, later): (Vec<Pending>, Vec<Pending>) =
                std::mem::take(&mut self.pending).into_iter().partition(|p| p.due <= now);
            self.pending = later;
            if due.is_empty() {
                break;
            }
            for Pending { cmd, .. } in due {
                let applied = match cmd.target {
                    CommandTarget::SceneClients => {
                        let version = self
                            .engine
                            .link(&cmd.link_id)
                            .and_then(|l| {
                                l.link()
                                    .mappings
                                    .iter()
                                    .find(|m| m.virtual_var == cmd.var)
                                    .and_then(|m| l.winner(&m.virtual_var))
                            })
                            .copied()
                            .unwrap_or_else(|| VersionedValue::new(cmd.value, now, Origin::Physical, 0));
                        let agent = self
                            .agents
                            .get_mut(&cmd.scope)
                            .ok_or_else(|| WorldError::UnknownAgent(cmd.scope.clone()))?;
                        agent.virtual_state.set(&cmd.var, VersionedValue { value: cmd.value, ..version });
                        let device = self
                            .engine
                            .link(&cmd.link_id)
                            .map(|l| l.link().device_id.clone())
                            .unwrap_or_default();
                        self.publish(&cmd.scope, &cmd.var, cmd.value, Origin::Physical, EventSource::Device(device));
                        self.push_log(
                            LogKind::Delivery,
                            &cmd.link_id,
                            &cmd.scope,
                            &cmd.var,
                            cmd.target.as_str(),
                            &cmd.value.to_json(),
                            format!("id={};ok", cmd.id),
                        );
                        Some(cmd.value)
                    }
                    CommandTarget::Device => {
                        let desc = self
                            .devices
                            .get(&cmd.scope)
                            .ok_or_else(|| WorldError::UnknownDevice(cmd.scope.clone()))?;
                        let result = adapter_send(devices, desc, &cmd, now);
                        let (applied, detail) = match &result {
                            Ok(v) => (Some(*v), format!("id={};ok", cmd.id)),
                            Err(e) => (None, format!("id={};failed: {e}", cmd.id)),
                        };
                        let shown = applied.map_or_else(|| cmd.value.to_json(), |v| v.to_json());
                        self.push_log(
                            LogKind::Delivery,
                            &cmd.link_id,
                            &cmd.scope,
                            &cmd.var,
                            cmd.target.as_str(),
                            &shown,
                            detail,
                        );
                        if let Some(v) = applied {
                            let agent = self
                                .engine
                                .link(&cmd.link_id)
                                .map(|l| l.link().agent_id.clone())
                                .unwrap_or_default();
                            let var = format!("{}/{}", cmd.scope, cmd.var);
                            self.publish(&agent, &var, v, Origin::Physical, EventSource::Device(cmd.scope.clone()));
                        }
                        applied
                    }
                };
                let more = self.engine.ack(&cmd, applied)?;
                self.queue(more);
            }
        }
        Ok(())
    }

    fn sample(&mut self, devices: &dyn DeviceAccess) {
        let now = self.now();
        let links = self.cfg.links.clone();
        for link in &links {
            let mut diverged = false;
            let state = self.engine.link(&link.id);
            for m in &link.mappings {
                let v = self
                    .agents
                    .get(&link.agent_id)
                    .and_then(|a| a.virtual_state.value(&m.virtual_var));
                let p = self
                    .devices
                    .get(&link.device_id)
                    .and_then(|d| devices.observe(d, &m.physical_var))
                    .or_else(|| state.and_then(|s| s.seen(&m.virtual_var, Origin::Physical)));
                let agree = matches!((v, p), (Some(v), Some(p)) if values_agree(&v, &p, m.transform));
                diverged |= !agree;
            }
            self.monitor.record(&link.id, now, diverged);
            if self.keep_samples {
                let incoherent = self.monitor.is_incoherent_at(&link.id, now);
                let detail = match (diverged, incoherent) {
                    (false, _) => "coherent",
                    (true, false) => "diverged",
                    (true, true) => "incoherent",
                };
                self.push_log(LogKind::Sample, &link.id, &link.device_id, "", "", "", detail.to_string());
            }
        }
    }
}

impl HubBackend for World {
    fn has_agent(&self, agent: &str) -> bool {
        self.agents.contains_key(agent)
    }

    fn client_update(&mut self, session: &str, agent: &str, var: &str, value: Value) -> Result<(), WireError> {
        let a = self
            .agents
            .get(agent)
            .ok_or_else(|| WireError::new(ErrorCode::UnknownAgent, format!("unknown agent {agent:?}")))?;
        let current = a
            .virtual_state
            .value(var)
            .ok_or_else(|| WireError::new(ErrorCode::UnknownVar, format!("agent {agent:?} has no variable {var:?}")))?;
        if current.kind() != value.kind() || !value.is_valid() {
            return Err(WireError::new(
                ErrorCode::BadFrame,
                format!("{var:?} expects a valid {} value", current.kind()),
            ));
        }
        // Keep-latest per variable within a tick.
        for item in self.inbound.iter_mut() {
            if let Inbound::Client {
                agent: a,
                var: v,
                value: queued,
                session: s,
            } = item
            {
                if a == agent && v == var {
                    *queued = value;
                    *s = session.to_string();
                    return Ok(());
                }
            }
        }
        self.inbound.push_back(Inbound::Client {
            session: session.to_string(),
            agent: agent.to_string(),
            var: var.to_string(),
            value,
        });
        Ok(())
    }

    fn now(&self) -> Timestamp {
        World::now(self)
    }
}
