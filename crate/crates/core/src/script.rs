//! Deterministic demo scripts.
//!
//! ```text
//! scenario ../scenarios/lamp.toml
//! seed 7
//! duration 10s
//! grace 0ms
//! latency plug-1 20ms..80ms
//!
//! at 1s    move lamp bulb_pos 0 1 0
//! at 1.1s  expect plug plug-1 on
//! at 3s    outage plug-1 2s
//! at 4s    press plug-1
//! at end   expect noise lamp-power 0.2 0.05
//! ```
//!
//! Times round up to the next tick. Actions at a tick run before the tick;
//! expectations are checked after it.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::device::{DeviceKind, LocalDevices, SmartPlug};
use crate::metrics::convergence_latencies;
use crate::model::{rgb_to_hsb, ColorRgb, Timestamp, Value, Vector3};
use crate::sync::CoherenceReport;
use crate::wire::HubBackend;
use crate::world::{local_devices, Latency, LogKind, LogRecord, World, WorldError};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("line {line}: {message}")]
    Action { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Set { agent: String, var: String, value: Value },
    GotoPlanet { agent: String, var: String, planet: usize },
    Press { device: String },
    Outage { device: String, duration_ms: u64 },
    HubOutage { duration_ms: u64 },
    Expect(Expect),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expect {
    Agent { agent: String, var: String, value: Value },
    Plug { device: String, on: bool },
    /// Bridge state matches the color's HSB form within one unit per field.
    Bulb { device: String, color: ColorRgb },
    /// Device commands issued in `[since, now]`.
    DeviceCommands { count: usize, since_ms: u64 },
    Coherent { link: String },
    Noise { link: String, value: f64, tolerance: f64 },
    /// Worst convergence latency of a link.
    Latency { link: String, max_ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum When {
    At(u64),
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub line: usize,
    pub when: When,
    pub text: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoScript {
    pub scenario: Option<PathBuf>,
    pub seed: u64,
    pub duration_ms: u64,
    pub grace_ms: Option<u64>,
    pub window: Option<(u64, u64)>,
    pub latency: Vec<(String, Latency)>,
    pub steps: Vec<Step>,
}

/// `250ms`, `1.5s`, `0`.
pub fn parse_duration(s: &str) -> Option<u64> {
    if s == "0" {
        return Some(0);
    }
    if let Some(ms) = s.strip_suffix("ms") {
        return ms.parse().ok();
    }
    let secs: f64 = s.strip_suffix('s')?.parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| (secs * 1000.0).round() as u64)
}

fn parse_latency(s: &str) -> Option<Latency> {
    match s.split_once("..") {
        Some((lo, hi)) => {
            let (lo, hi) = (parse_duration(lo)?, parse_duration(hi)?);
            (lo <= hi).then_some(Latency::Uniform(lo, hi))
        }
        None => parse_duration(s).map(Latency::Fixed),
    }
}

fn parse_action(words: &[&str], rest_from: impl Fn(usize) -> String) -> Result<Action, String> {
    let need = |n: usize| {
        if words.len() < n {
            Err(format!("{:?} needs {} arguments", words[0], n - 1))
        } else {
            Ok(())
        }
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
    let dur = |s: &str| parse_duration(s).ok_or_else(|| format!("bad duration {s:?}"));
    Ok(match words[0] {
        "set" => {
            need(4)?;
            let json = rest_from(3);
            let value: Value = serde_json::from_str(&json).map_err(|e| format!("bad value {json:?}: {e}"))?;
            Action::Set {
                agent: words[1].into(),
                var: words[2].into(),
                value,
            }
        }
        "move" => {
            need(6)?;
            Action::Set {
                agent: words[1].into(),
                var: words[2].into(),
                value: Value::Position(Vector3::new(num(words[3])?, num(words[4])?, num(words[5])?)),
            }
        }
        "goto-planet" => {
            need(4)?;
            Action::GotoPlanet {
                agent: words[1].into(),
                var: words[2].into(),
                planet: words[3].parse().map_err(|_| "bad planet index".to_string())?,
            }
        }
        "press" => {
            need(2)?;
            Action::Press { device: words[1].into() }
        }
        "outage" => {
            need(3)?;
            Action::Outage {
                device: words[1].into(),
                duration_ms: dur(words[2])?,
            }
        }
        "hub-outage" => {
            need(2)?;
            Action::HubOutage {
                duration_ms: dur(words[1])?,
            }
        }
        "expect" => {
            need(2)?;
            Action::Expect(parse_expect(&words[1..], |i| rest_from(i + 1))?)
        }
        other => return Err(format!("unknown action {other:?}")),
    })
}

fn parse_expect(words: &[&str], rest_from: impl Fn(usize) -> String) -> Result<Expect, String> {
    let need = |n: usize| {
        if words.len() < n {
            Err(format!("expect {:?} needs {} arguments", words[0], n - 1))
        } else {
            Ok(())
        }
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
    Ok(match words[0] {
        "agent" => {
            need(4)?;
            let json = rest_from(3);
            Expect::Agent {
                agent: words[1].into(),
                var: words[2].into(),
                value: serde_json::from_str(&json).map_err(|e| format!("bad value {json:?}: {e}"))?,
            }
        }
        "plug" => {
            need(3)?;
            let on = match words[2] {
                "on" => true,
                "off" => false,
                w => return Err(format!("expected on/off, got {w:?}")),
            };
            Expect::Plug {
                device: words[1].into(),
                on,
            }
        }
        "bulb" => {
            need(5)?;
            let color = ColorRgb {
                r: num(words[2])?,
                g: num(words[3])?,
                b: num(words[4])?,
            };
            if !color.is_valid() {
                return Err("color channels must be in [0, 1]".into());
            }
            Expect::Bulb {
                device: words[1].into(),
                color,
            }
        }
        "device-commands" => {
            // expect device-commands 4 since 2s
            need(4)?;
            if words[2] != "since" {
                return Err("expected `device-commands <n> since <time>`".into());
            }
            Expect::DeviceCommands {
                count: words[1].parse().map_err(|_| "bad count".to_string())?,
                since_ms: parse_duration(words[3]).ok_or("bad time")?,
            }
        }
        "coherent" => {
            need(2)?;
            Expect::Coherent { link: words[1].into() }
        }
        "noise" => {
            need(3)?;
            Expect::Noise {
                link: words[1].into(),
                value: num(words[2])?,
                tolerance: words.get(3).map(|w| num(w)).transpose()?.unwrap_or(1e-9),
            }
        }
        "latency" => {
            // expect latency lamp-power <= 100ms
            need(4)?;
            if words[2] != "<=" {
                return Err("expected `latency <link> <= <time>`".into());
            }
            Expect::Latency {
                link: words[1].into(),
                max_ms: parse_duration(words[3]).ok_or("bad time")?,
            }
        }
        other => return Err(format!("unknown expectation {other:?}")),
    })
}

impl DemoScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut s = DemoScript {
            scenario: None,
            seed: 0,
            duration_ms: 10_000,
            grace_ms: None,
            window: None,
            latency: Vec::new(),
            steps: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScriptError::Parse { line, message };
            let words: Vec<&str> = content.split_whitespace().collect();
            let dur = |w: Option<&&str>| {
                w.and_then(|w| parse_duration(w))
                    .ok_or_else(|| err(format!("{:?} needs a duration", words[0])))
            };
            match words[0] {
                "scenario" => s.scenario = Some(PathBuf::from(words.get(1).ok_or_else(|| err("missing path".into()))?)),
                "seed" => {
                    s.seed = words
                        .get(1)
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| err("seed needs an integer".into()))?
                }
                "duration" => s.duration_ms = dur(words.get(1))?,
                "grace" => s.grace_ms = Some(dur(words.get(1))?),
                "window" => s.window = Some((dur(words.get(1))?, dur(words.get(2))?)),
                "latency" => {
                    let (Some(dev), Some(spec)) = (words.get(1), words.get(2)) else {
                        return Err(err("latency needs a device and a delay".into()));
                    };
                    let l = parse_latency(spec).ok_or_else(|| err(format!("bad latency {spec:?}")))?;
                    s.latency.push((dev.to_string(), l));
                }
                "at" => {
                    if words.len() < 3 {
                        return Err(err("`at` needs a time and an action".into()));
                    }
                    let when = match words[1] {
                        "end" => When::End,
                        t => When::At(parse_duration(t).ok_or_else(|| err(format!("bad time {t:?}")))?),
                    };
                    let body = &words[2..];
                    // Remainder of the line from word `i` of the action, for JSON values.
                    let rest_from = |idx: usize| {
                        let mut rest = content;
                        for w in words.iter().take(idx + 2) {
                            rest = rest.trim_start().strip_prefix(w).unwrap_or(rest);
                        }
                        rest.trim().to_string()
                    };
                    let action = parse_action(body, rest_from).map_err(err)?;
                    s.steps.push(Step {
                        line,
                        when,
                        text: body.join(" "),
                        action,
                    });
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        if s.duration_ms == 0 {
            return Err(ScriptError::Parse {
                line: 0,
                message: "duration must be positive".into(),
            });
        }
        Ok(s)
    }

    /// Loads a script; a relative `scenario` path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut s = Self::parse(&text)?;
        if let (Some(sc), Some(dir)) = (&s.scenario, path.parent()) {
            if sc.is_relative() {
                s.scenario = Some(dir.join(sc));
            }
        }
        Ok(s)
    }

    pub fn window(&self) -> (Timestamp, Timestamp) {
        let (a, b) = self.window.unwrap_or((0, self.duration_ms));
        (Timestamp(a), Timestamp(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub line: usize,
    pub at_ms: u64,
    pub text: String,
    pub passed: bool,
    pub detail: String,
}

pub struct DemoRun {
    pub world: World,
    pub devices: LocalDevices,
    pub outcomes: Vec<Outcome>,
    pub log: Vec<LogRecord>,
    pub reports: Vec<CoherenceReport>,
}

impl DemoRun {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

const SCRIPT_SESSION: &str = "script";

fn apply(world: &mut World, devices: &mut LocalDevices, step: &Step) -> Result<(), ScriptError> {
    let now = world.now();
    let fail = |message: String| ScriptError::Action {
        line: step.line,
        message,
    };
    match &step.action {
        Action::Set { agent, var, value } => world
            .client_update(SCRIPT_SESSION, agent, var, *value)
            .map_err(|e| fail(e.to_string()))?,
        Action::GotoPlanet { agent, var, planet } => {
            let pos = world
                .planet_position_at(*planet, now)
                .ok_or_else(|| fail(format!("no planet {planet}")))?;
            world
                .client_update(SCRIPT_SESSION, agent, var, Value::Position(pos))
                .map_err(|e| fail(e.to_string()))?;
        }
        Action::Press { device } => {
            plug_mut(devices, device).ok_or_else(|| fail(format!("{device:?} is not a plug")))?.press_button(now);
        }
        Action::Outage { device, duration_ms } => {
            let desc = world.device(device).ok_or_else(|| fail(format!("unknown device {device:?}")))?;
            match desc.kind {
                DeviceKind::Plug => plug_mut(devices, device)
                    .ok_or_else(|| fail(format!("no emulator for {device:?}")))?
                    .outages
                    .add(now, *duration_ms),
                DeviceKind::ColorBulb => devices.bridge.outages.add(now, *duration_ms),
            }
        }
        Action::HubOutage { duration_ms } => world.hub_outages.add(now, *duration_ms),
        Action::Expect(_) => {}
    }
    Ok(())
}

fn plug_mut<'a>(devices: &'a mut LocalDevices, id: &str) -> Option<&'a mut SmartPlug> {
    devices.plugs.get_mut(id)
}

fn hue_distance(a: u16, b: u16) -> u32 {
    let d = (a as i32 - b as i32).unsigned_abs();
    d.min(65536 - d)
}

fn check(world: &World, devices: &LocalDevices, log: &[LogRecord], window: (Timestamp, Timestamp), e: &Expect) -> (bool, String) {
    let now = world.now();
    match e {
        Expect::Agent { agent, var, value } => {
            let got = world.agent(agent).and_then(|a| a.virtual_state.value(var));
            let ok = got.is_some_and(|g| crate::sync::values_agree(&g, value, crate::model::Transform::Identity));
            (ok, format!("{agent}.{var} = {}", got.map_or("missing".into(), |g| g.to_json())))
        }
        Expect::Plug { device, on } => {
            let got = devices.plugs.get(device).map(|p| p.state().on);
            (got == Some(*on), format!("plug on = {got:?}"))
        }
        Expect::Bulb { device, color } => {
            let want = rgb_to_hsb(*color);
            let got = world
                .device(device)
                .and_then(|d| d.light)
                .and_then(|l| devices.bridge.light(l));
            match got {
                None => (false, format!("no bulb {device:?}")),
                Some(b) => {
                    let ok = b.on == want.on
                        && hue_distance(b.hue, want.hue) <= 1
                        && b.sat.abs_diff(want.sat) <= 1
                        && b.bri.abs_diff(want.bri) <= 1;
                    (
                        ok,
                        format!(
                            "bulb on={} hue={} sat={} bri={}, want on={} hue={} sat={} bri={}",
                            b.on, b.hue, b.sat, b.bri, want.on, want.hue, want.sat, want.bri
                        ),
                    )
                }
            }
        }
        Expect::DeviceCommands { count, since_ms } => {
            let n = log
                .iter()
                .filter(|r| r.kind == LogKind::Command && r.side == "device" && r.ts.0 >= *since_ms && r.ts <= now)
                .count();
            (n == *count, format!("{n} device commands"))
        }
        Expect::Coherent { link } => {
            let last = world.monitor().samples(link).last().copied();
            let ok = last.is_some_and(|s| !s.diverged);
            (ok, format!("last sample {last:?}"))
        }
        Expect::Noise { link, value, tolerance } => match world.coherence_report(link, window) {
            Ok(r) => (
                (r.noise_score - value).abs() <= *tolerance,
                format!("noise {:.4} ({} ms incoherent)", r.noise_score, r.incoherent_ms()),
            ),
            Err(err) => (false, err.to_string()),
        },
        Expect::Latency { link, max_ms } => {
            let (lat, unconverged) = convergence_latencies(log, link);
            let worst = lat.last().copied();
            (
                unconverged == 0 && worst.is_some_and(|w| w <= *max_ms),
                format!("worst {worst:?} ms over {} updates, {unconverged} unconverged", lat.len()),
            )
        }
    }
}

/// Runs a script against in-process emulators.
pub fn run_demo(script: &DemoScript, cfg: ScenarioConfig) -> Result<DemoRun, ScriptError> {
    let mut devices = local_devices(&cfg);
    let mut world = World::new(cfg, script.seed)?;
    if let Some(g) = script.grace_ms {
        world.set_grace_ms(g);
    }
    for (dev, l) in &script.latency {
        world.set_latency(dev, *l)?;
    }
    let clock = world.clock();
    let ticks = script.duration_ms.div_ceil(clock.dt_ms);
    let mut steps: Vec<(u64, &Step)> = script
        .steps
        .iter()
        .map(|s| match s.when {
            When::At(t) => (clock.tick_at(t), s),
            When::End => (u64::MAX, s),
        })
        .collect();
    steps.sort_by_key(|(t, s)| (*t, s.line));

    let mut outcomes = Vec::new();
    let mut next = 0;
    for tick in 0..ticks {
        let now = world.now();
        let mut expects = Vec::new();
        while next < steps.len() && steps[next].0 == tick {
            let step = steps[next].1;
            match &step.action {
                Action::Expect(e) => expects.push((step, e)),
                _ => apply(&mut world, &mut devices, step)?,
            }
            next += 1;
        }
        for plug in devices.plugs.values_mut() {
            plug.flush(now, |ev| world.receive_device_event(ev.clone()));
        }
        world.run_tick(&mut devices)?;
        // Checks see the state at the end of the tick, stamped with its start.
        for (step, e) in expects {
            let (passed, detail) = check_at(&world, &devices, script.window(), now, e);
            outcomes.push(Outcome {
                line: step.line,
                at_ms: now.0,
                text: step.text.clone(),
                passed,
                detail,
            });
        }
    }
    let end = Timestamp(ticks * clock.dt_ms);
    for (t, step) in &steps[next..] {
        match &step.action {
            Action::Expect(e) => {
                let (passed, detail) = check_at(&world, &devices, script.window(), end, e);
                outcomes.push(Outcome {
                    line: step.line,
                    at_ms: end.0,
                    text: step.text.clone(),
                    passed,
                    detail,
                });
            }
            _ if *t == u64::MAX => {
                return Err(ScriptError::Action {
                    line: step.line,
                    message: "only expectations may run at end".into(),
                })
            }
            _ => {
                outcomes.push(Outcome {
                    line: step.line,
                    at_ms: end.0,
                    text: step.text.clone(),
                    passed: false,
                    detail: "scheduled after the end of the run".into(),
                });
            }
        }
    }
    let reports = world.coherence_reports(script.window()).unwrap_or_default();
    let log = world.log().to_vec();
    Ok(DemoRun {
        world,
        devices,
        outcomes,
        log,
        reports,
    })
}

fn check_at(world: &World, devices: &LocalDevices, window: (Timestamp, Timestamp), now: Timestamp, e: &Expect) -> (bool, String) {
    let log: Vec<LogRecord> = world.log().iter().filter(|r| r.ts <= now).cloned().collect();
    check(world, devices, &log, window, e)
}

/// Loads a script and its scenario, then runs it.
pub fn run_demo_file(path: &Path) -> Result<DemoRun, ScriptError> {
    let script = DemoScript::load(path)?;
    let scenario = script.scenario.clone().ok_or(ScriptError::Parse {
        line: 0,
        message: "script names no scenario".into(),
    })?;
    let cfg = ScenarioConfig::load(&scenario)?;
    run_demo(&script, cfg)
}
