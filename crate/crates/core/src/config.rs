//! Scenario configuration files (TOML).
//!
//! ```toml
//! [scenario]
//! name = "lamp"
//! tick_hz = 20
//! grace_ms = 100
//!
//! [[agent]]
//! id = "lamp"
//! criteria = { embodiment = "dual", interaction = "two_way", agency = "reactive" }
//! device = "plug-1"
//! vars = { power = false, bulb_pos = [0.6, 1.0, 0.0] }
//!
//! [[device]]
//! id = "plug-1"
//! kind = "plug"
//! endpoint = "http://127.0.0.1:8082"
//! key = "xri-demo-key"
//!
//! [[link]]
//! id = "lamp-power"
//! agent = "lamp"
//! device = "plug-1"
//! mode = "two_way"
//! mappings = [{ virtual = "power", physical = "power" }]
//!
//! [lamp]
//! agent = "lamp"
//! plug = "plug-1"
//! socket_pos = [0.0, 1.0, 0.0]
//! socket_radius = 0.1
//! ```
//!
//! A `[galaxy]` table with `sun_pos`, a `rocket` table, four `bulbs` and a
//! list of `[[galaxy.planet]]` entries defines the ambient-lighting scene.
//! An optional `[run]` table provides defaults for the hub command line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::device::{DeviceDescriptor, DeviceKind};
use crate::model::{
    validate_agent, AgentCriteria, ColorRgb, ExtendedMetaverseAgent, LinkMode, Origin, StateSnapshot, SyncLink,
    Timestamp, Value, ValueKind, VarMapping, Vector3, VersionedValue,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioHeader {
    pub name: String,
    #[serde(default = "default_tick_hz")]
    pub tick_hz: f64,
    #[serde(default = "default_grace_ms")]
    pub grace_ms: u64,
    #[serde(default = "default_bridge_user")]
    pub bridge_user: String,
    #[serde(default = "default_bridge_lights")]
    pub bridge_lights: u32,
}

fn default_tick_hz() -> f64 {
    20.0
}
fn default_grace_ms() -> u64 {
    100
}
fn default_bridge_user() -> String {
    "xri".into()
}
fn default_bridge_lights() -> u32 {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: String,
    pub criteria: AgentCriteria,
    #[serde(default)]
    pub device: Option<String>,
    pub vars: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub id: String,
    pub agent: String,
    pub device: String,
    pub mode: LinkMode,
    pub mappings: Vec<VarMapping>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LampConfig {
    pub agent: String,
    pub plug: String,
    pub socket_pos: Vector3Repr,
    pub socket_radius: f64,
    #[serde(default = "default_bulb_var")]
    pub bulb_var: String,
    #[serde(default = "default_power_var")]
    pub power_var: String,
}

fn default_bulb_var() -> String {
    "bulb_pos".into()
}
fn default_power_var() -> String {
    "power".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocketConfig {
    pub agent: String,
    #[serde(default = "default_pos_var")]
    pub pos_var: String,
    #[serde(default = "default_color_var")]
    pub color_var: String,
    pub radius: f64,
}

fn default_pos_var() -> String {
    "pos".into()
}
fn default_color_var() -> String {
    "color".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanetConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub pos: Vector3Repr,
    pub radius: f64,
    /// Angular speed about the sun's vertical axis, rad/s.
    pub omega: f64,
    pub color: ColorRgb,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalaxyConfig {
    pub sun_pos: Vector3Repr,
    pub rocket: RocketConfig,
    pub bulbs: Vec<String>,
    #[serde(rename = "planet")]
    pub planets: Vec<PlanetConfig>,
}

/// `[x, y, z]` in config files.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(from = "[f64; 3]")]
pub struct Vector3Repr(pub Vector3);

impl From<[f64; 3]> for Vector3Repr {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Vector3Repr(Vector3::new(x, y, z))
    }
}

/// Optional hub defaults stored next to a scenario.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDefaults {
    pub listen: Option<String>,
    pub tcp_listen: Option<String>,
    pub bridge_port: Option<u16>,
    pub plug_port: Option<u16>,
    pub seed: Option<u64>,
    pub metrics: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    scenario: ScenarioHeader,
    #[serde(default, rename = "agent")]
    agents: Vec<AgentConfig>,
    #[serde(default, rename = "device")]
    devices: Vec<DeviceDescriptor>,
    #[serde(default, rename = "link")]
    links: Vec<LinkConfig>,
    #[serde(default)]
    lamp: Option<LampConfig>,
    #[serde(default)]
    galaxy: Option<GalaxyConfig>,
    #[serde(default)]
    run: RunDefaults,
}

/// Lamp scene parameters after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LampScenario {
    pub agent: String,
    pub plug: String,
    pub socket_pos: Vector3,
    pub socket_radius: f64,
    pub bulb_var: String,
    pub power_var: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Planet {
    pub name: String,
    pub pos: Vector3,
    pub radius: f64,
    pub omega: f64,
    pub color: ColorRgb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rocket {
    pub agent: String,
    pub pos_var: String,
    pub color_var: String,
    pub radius: f64,
}

/// Ambient-lighting scene parameters after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct GalaxyScenario {
    pub sun_pos: Vector3,
    pub planets: Vec<Planet>,
    pub rocket: Rocket,
    pub bulbs: Vec<String>,
    /// Links carrying the rocket color to each bulb, in bulb order.
    pub ambient_links: Vec<String>,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub tick_ms: u64,
    pub grace_ms: u64,
    pub bridge_user: String,
    pub bridge_lights: u32,
    pub agents: Vec<ExtendedMetaverseAgent>,
    pub devices: Vec<DeviceDescriptor>,
    pub links: Vec<SyncLink>,
    pub lamp: Option<LampScenario>,
    pub galaxy: Option<GalaxyScenario>,
    pub run: RunDefaults,
}

pub const BULBS_PER_GALAXY: usize = 4;

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates scenario text. `origin` names the source in
    /// diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ConfigError::Parse {
                path: origin.to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        build(raw).map_err(|message| ConfigError::Invalid {
            path: origin.to_string(),
            message,
        })
    }
}

fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a str>) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(format!("{what} id must not be empty"));
        }
        if !seen.insert(id) {
            return Err(format!("duplicate {what} id {id:?}"));
        }
    }
    Ok(())
}

fn build(raw: RawScenario) -> Result<ScenarioConfig, String> {
    let header = raw.scenario;
    if !(header.tick_hz.is_finite() && header.tick_hz > 0.0) {
        return Err("scenario.tick_hz must be > 0".into());
    }
    let tick_ms = (1000.0 / header.tick_hz).round() as u64;
    if tick_ms == 0 {
        return Err("scenario.tick_hz too high (tick shorter than 1 ms)".into());
    }

    unique("agent", raw.agents.iter().map(|a| a.id.as_str()))?;
    unique("device", raw.devices.iter().map(|d| d.id.as_str()))?;
    unique("link", raw.links.iter().map(|l| l.id.as_str()))?;

    let devices: BTreeMap<&str, &DeviceDescriptor> = raw.devices.iter().map(|d| (d.id.as_str(), d)).collect();
    for d in &raw.devices {
        match d.kind {
            DeviceKind::Plug if d.key.is_none() => return Err(format!("device {:?}: plugs need a key", d.id)),
            DeviceKind::ColorBulb => match d.light {
                Some(l) if l >= 1 && l <= header.bridge_lights => {}
                _ => {
                    return Err(format!(
                        "device {:?}: color bulbs need a light number in 1..={}",
                        d.id, header.bridge_lights
                    ))
                }
            },
            _ => {}
        }
    }

    let links: Vec<SyncLink> = raw
        .links
        .iter()
        .map(|l| SyncLink {
            id: l.id.clone(),
            agent_id: l.agent.clone(),
            device_id: l.device.clone(),
            mode: l.mode,
            mappings: l.mappings.clone(),
        })
        .collect();

    for l in &links {
        let Some(dev) = devices.get(l.device_id.as_str()) else {
            return Err(format!("link {:?}: unknown device {:?}", l.id, l.device_id));
        };
        for m in &l.mappings {
            let ok = matches!(
                (dev.kind, m.physical_var.as_str()),
                (DeviceKind::Plug, "power") | (DeviceKind::ColorBulb, "color") | (DeviceKind::ColorBulb, "power")
            );
            if !ok {
                return Err(format!(
                    "link {:?}: device {:?} has no variable {:?}",
                    l.id, dev.id, m.physical_var
                ));
            }
        }
    }

    let mut agents = Vec::new();
    for a in &raw.agents {
        let mut state = StateSnapshot::default();
        for (var, value) in &a.vars {
            if !state.set(var, VersionedValue::new(*value, Timestamp(0), Origin::Virtual, 0)) {
                return Err(format!("agent {:?}: variable names must not be empty", a.id));
            }
        }
        if let Some(dev) = &a.device {
            if !devices.contains_key(dev.as_str()) {
                return Err(format!("agent {:?}: unknown device {dev:?}", a.id));
            }
        }
        let own: Vec<SyncLink> = links.iter().filter(|l| l.agent_id == a.id).cloned().collect();
        let agent = ExtendedMetaverseAgent {
            id: a.id.clone(),
            criteria: a.criteria,
            virtual_state: state,
            device: a.device.clone(),
            links: own.iter().map(|l| l.id.clone()).collect(),
        };
        let violations = validate_agent(&agent, &own);
        if let Some(v) = violations.first() {
            return Err(format!("agent {:?}: {v}", a.id));
        }
        for l in &own {
            for m in &l.mappings {
                let kind = agent.virtual_state.value(&m.virtual_var).map(|v| v.kind());
                let expected = match (devices[l.device_id.as_str()].kind, m.physical_var.as_str()) {
                    (DeviceKind::ColorBulb, "color") => ValueKind::Color,
                    _ => ValueKind::Bool,
                };
                if kind != Some(expected) {
                    return Err(format!(
                        "link {:?}: {:?} must be a {expected} variable",
                        l.id, m.virtual_var
                    ));
                }
                if expected == ValueKind::Color && m.transform != crate::model::Transform::RgbToHsb {
                    return Err(format!("link {:?}: bulb colors need transform = \"rgb_to_hsb\"", l.id));
                }
            }
        }
        agents.push(agent);
    }
    for l in &links {
        if !agents.iter().any(|a| a.id == l.agent_id) {
            return Err(format!("link {:?}: unknown agent {:?}", l.id, l.agent_id));
        }
    }

    let agent_var_kind = |agent: &str, var: &str| {
        agents
            .iter()
            .find(|a| a.id == agent)
            .and_then(|a| a.virtual_state.value(var))
            .map(|v| v.kind())
    };

    let lamp = match raw.lamp {
        None => None,
        Some(l) => {
            if !(l.socket_radius.is_finite() && l.socket_radius > 0.0) {
                return Err("lamp.socket_radius must be > 0".into());
            }
            if agent_var_kind(&l.agent, &l.bulb_var) != Some(ValueKind::Position) {
                return Err(format!("lamp: agent {:?} needs position var {:?}", l.agent, l.bulb_var));
            }
            if agent_var_kind(&l.agent, &l.power_var) != Some(ValueKind::Bool) {
                return Err(format!("lamp: agent {:?} needs bool var {:?}", l.agent, l.power_var));
            }
            if devices.get(l.plug.as_str()).map(|d| d.kind) != Some(DeviceKind::Plug) {
                return Err(format!("lamp: {:?} is not a plug device", l.plug));
            }
            Some(LampScenario {
                agent: l.agent,
                plug: l.plug,
                socket_pos: l.socket_pos.0,
                socket_radius: l.socket_radius,
                bulb_var: l.bulb_var,
                power_var: l.power_var,
            })
        }
    };

    let galaxy = match raw.galaxy {
        None => None,
        Some(g) => {
            if g.bulbs.len() != BULBS_PER_GALAXY {
                return Err(format!(
                    "galaxy.bulbs must list exactly {BULBS_PER_GALAXY} devices, got {}",
                    g.bulbs.len()
                ));
            }
            if !(g.rocket.radius.is_finite() && g.rocket.radius > 0.0) {
                return Err("galaxy.rocket.radius must be > 0".into());
            }
            if agent_var_kind(&g.rocket.agent, &g.rocket.pos_var) != Some(ValueKind::Position) {
                return Err(format!("galaxy: rocket needs position var {:?}", g.rocket.pos_var));
            }
            if agent_var_kind(&g.rocket.agent, &g.rocket.color_var) != Some(ValueKind::Color) {
                return Err(format!("galaxy: rocket needs color var {:?}", g.rocket.color_var));
            }
            let mut ambient_links = Vec::new();
            for b in &g.bulbs {
                if devices.get(b.as_str()).map(|d| d.kind) != Some(DeviceKind::ColorBulb) {
                    return Err(format!("galaxy: {b:?} is not a color bulb"));
                }
                let link = links.iter().find(|l| {
                    l.agent_id == g.rocket.agent
                        && &l.device_id == b
                        && l.mapping_for(&g.rocket.color_var, Origin::Virtual).is_some()
                });
                match link {
                    Some(l) => ambient_links.push(l.id.clone()),
                    None => return Err(format!("galaxy: no link carries the rocket color to {b:?}")),
                }
            }
            let mut planets = Vec::new();
            for (i, p) in g.planets.into_iter().enumerate() {
                if !(p.radius.is_finite() && p.radius > 0.0) {
                    return Err(format!("galaxy.planet[{i}].radius must be > 0"));
                }
                if !p.color.is_valid() || !p.omega.is_finite() || !p.pos.0.is_finite() {
                    return Err(format!("galaxy.planet[{i}]: invalid color, omega or position"));
                }
                planets.push(Planet {
                    name: p.name.unwrap_or_else(|| format!("planet-{}", i + 1)),
                    pos: p.pos.0,
                    radius: p.radius,
                    omega: p.omega,
                    color: p.color,
                });
            }
            Some(GalaxyScenario {
                sun_pos: g.sun_pos.0,
                planets,
                rocket: Rocket {
                    agent: g.rocket.agent,
                    pos_var: g.rocket.pos_var,
                    color_var: g.rocket.color_var,
                    radius: g.rocket.radius,
                },
                bulbs: g.bulbs,
                ambient_links,
            })
        }
    };

    Ok(ScenarioConfig {
        name: header.name,
        tick_ms,
        grace_ms: header.grace_ms,
        bridge_user: header.bridge_user,
        bridge_lights: header.bridge_lights,
        agents,
        devices: raw.devices,
        links,
        lamp,
        galaxy,
        run: raw.run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAMP: &str = r#"
[scenario]
name = "lamp"

[[agent]]
id = "lamp"
criteria = { embodiment = "dual", interaction = "two_way", agency = "reactive" }
device = "plug-1"
vars = { power = false, bulb_pos = [0.6, 1.0, 0.0] }

[[device]]
id = "plug-1"
kind = "plug"
endpoint = "http://127.0.0.1:8082"
key = "k"

[[link]]
id = "lamp-power"
agent = "lamp"
device = "plug-1"
mode = "two_way"
mappings = [{ virtual = "power", physical = "power" }]

[lamp]
agent = "lamp"
plug = "plug-1"
socket_pos = [0.0, 1.0, 0.0]
socket_radius = 0.1
"#;

    #[test]
    fn parses_lamp() {
        let c = ScenarioConfig::parse(LAMP, "lamp.toml").unwrap();
        assert_eq!(c.tick_ms, 50);
        assert_eq!(c.grace_ms, 100);
        assert_eq!(c.agents[0].links, vec!["lamp-power".to_string()]);
        assert_eq!(c.lamp.unwrap().socket_radius, 0.1);
    }

    #[test]
    fn syntax_error_has_line() {
        let broken = LAMP.replace("socket_radius = 0.1", "socket_radius = = 0.1");
        match ScenarioConfig::parse(&broken, "lamp.toml") {
            Err(ConfigError::Parse { line, .. }) => {
                let expected = broken.lines().position(|l| l.contains("= =")).unwrap() + 1;
                assert_eq!(line, expected);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let bad = LAMP.replace("socket_radius = 0.1", "socket_radius = 0.0");
        assert!(matches!(
            ScenarioConfig::parse(&bad, "x"),
            Err(ConfigError::Invalid { .. })
        ));
        let bad = LAMP.replace(r#"embodiment = "dual""#, r#"embodiment = "virtual_only""#);
        let err = ScenarioConfig::parse(&bad, "x").unwrap_err().to_string();
        assert!(err.contains("VirtualOnly"), "{err}");
        let bad = LAMP.replace(r#"device = "plug-1"
mode"#, r#"device = "plug-9"
mode"#);
        assert!(ScenarioConfig::parse(&bad, "x").unwrap_err().to_string().contains("unknown device"));
    }
}
