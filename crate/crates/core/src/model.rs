//! Domain types shared by the hub: scene geometry, colors, versioned values,
//! agents and the links that tie them to devices.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};

/// Scene position in meters. Right-handed, +Y up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vector3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vector3 {
    pub const ZERO: Vector3 = Vector3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(self, other: Vector3) -> Vector3 {
        Vector3::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(self, other: Vector3) -> Vector3 {
        Vector3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: Vector3) -> f64 {
        self.sub(other).norm()
    }
}

/// Color with unit-interval channels, as picked in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorRgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl ColorRgb {
    pub const BLACK: ColorRgb = ColorRgb { r: 0.0, g: 0.0, b: 0.0 };

    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn is_valid(&self) -> bool {
        [self.r, self.g, self.b]
            .iter()
            .all(|c| c.is_finite() && (0.0..=1.0).contains(c))
    }

    /// Largest per-channel absolute difference.
    pub fn max_channel_diff(&self, other: &ColorRgb) -> f64 {
        (self.r - other.r)
            .abs()
            .max((self.g - other.g).abs())
            .max((self.b - other.b).abs())
    }
}

pub const HUE_MAX: u16 = 65535;
pub const SAT_MAX: u8 = 254;
pub const BRI_MIN: u8 = 1;
pub const BRI_MAX: u8 = 254;

/// Bridge-native light color: hue 0..=65535, sat 0..=254, bri 1..=254.
/// When `on` is false the other fields are kept but have no visible effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColorHsb {
    pub on: bool,
    pub hue: u16,
    pub sat: u8,
    pub bri: u8,
}

impl ColorHsb {
    pub fn is_valid(&self) -> bool {
        self.sat <= SAT_MAX && (BRI_MIN..=BRI_MAX).contains(&self.bri)
    }
}

/// Converts a scene color to bridge units via plain HSV. Black maps to a
/// switched-off light.
pub fn rgb_to_hsb(c: ColorRgb) -> ColorHsb {
    let r = c.r.clamp(0.0, 1.0);
    let g = c.g.clamp(0.0, 1.0);
    let b = c.b.clamp(0.0, 1.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;

    let hue_deg = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max <= 0.0 { 0.0 } else { delta / max };

    let hue = ((hue_deg / 360.0 * f64::from(HUE_MAX)).round() as u32 % 65536) as u16;
    let sat = (sat * f64::from(SAT_MAX)).round().min(f64::from(SAT_MAX)) as u8;
    let bri = (max * f64::from(BRI_MAX)).round().clamp(1.0, f64::from(BRI_MAX)) as u8;

    ColorHsb {
        on: max > 0.0,
        hue,
        sat,
        bri,
    }
}

/// Inverse of [`rgb_to_hsb`] up to quantization. An off light renders black.
pub fn hsb_to_rgb(c: ColorHsb) -> ColorRgb {
    if !c.on {
        return ColorRgb::BLACK;
    }
    let h = f64::from(c.hue) / f64::from(HUE_MAX) * 360.0;
    let s = f64::from(c.sat.min(SAT_MAX)) / f64::from(SAT_MAX);
    let v = f64::from(c.bri.clamp(BRI_MIN, BRI_MAX)) / f64::from(BRI_MAX);

    let chroma = v * s;
    let sector = (h / 60.0).rem_euclid(6.0);
    let x = chroma * (1.0 - (sector.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    ColorRgb::new(r + m, g + m, b + m)
}

/// Hub-assigned logical time in milliseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn seconds(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embodiment {
    VirtualOnly,
    PhysicalOnly,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    None,
    VirtualToPhysical,
    PhysicalToVirtual,
    TwoWay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agency {
    Passive,
    Reactive,
    Autonomous,
}

/// Classification of an agent along embodiment, interaction and agency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentCriteria {
    pub embodiment: Embodiment,
    pub interaction: Interaction,
    pub agency: Agency,
}

/// Direction policy of a sync link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    VirtualToPhysical,
    PhysicalToVirtual,
    TwoWay,
}

impl LinkMode {
    pub fn as_interaction(self) -> Interaction {
        match self {
            LinkMode::VirtualToPhysical => Interaction::VirtualToPhysical,
            LinkMode::PhysicalToVirtual => Interaction::PhysicalToVirtual,
            LinkMode::TwoWay => Interaction::TwoWay,
        }
    }

    /// Whether updates from `origin` may be propagated to the other side.
    pub fn propagates_from(self, origin: Origin) -> bool {
        matches!(
            (self, origin),
            (LinkMode::TwoWay, _)
                | (LinkMode::VirtualToPhysical, Origin::Virtual)
                | (LinkMode::PhysicalToVirtual, Origin::Physical)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Virtual,
    Physical,
}

impl Origin {
    pub fn opposite(self) -> Origin {
        match self {
            Origin::Virtual => Origin::Physical,
            Origin::Physical => Origin::Virtual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Virtual => "virtual",
            Origin::Physical => "physical",
        }
    }

    /// Tie-break rank: physical wins over virtual on equal timestamps.
    pub(crate) fn priority(self) -> u8 {
        match self {
            Origin::Virtual => 0,
            Origin::Physical => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Bool,
    Scalar,
    Color,
    Position,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Bool => "bool",
            ValueKind::Scalar => "scalar",
            ValueKind::Color => "color",
            ValueKind::Position => "position",
        })
    }
}

/// A state variable's value.
///
/// JSON form: `true`, `0.5`, `{"r":..,"g":..,"b":..}` or `{"x":..,"y":..,"z":..}`.
/// Positions may also be written as a 3-element array on input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Bool(bool),
    Scalar(f64),
    Color(ColorRgb),
    Position(Vector3),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Bool(_) => ValueKind::Bool,
            Value::Scalar(_) => ValueKind::Scalar,
            Value::Color(_) => ValueKind::Color,
            Value::Position(_) => ValueKind::Position,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            Value::Bool(_) => true,
            Value::Scalar(s) => s.is_finite(),
            Value::Color(c) => c.is_valid(),
            Value::Position(p) => p.is_finite(),
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_color(&self) -> Option<ColorRgb> {
        match self {
            Value::Color(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_position(&self) -> Option<Vector3> {
        match self {
            Value::Position(p) => Some(*p),
            _ => None,
        }
    }

    /// Canonical JSON text, used in logs.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("values serialize")
    }

    /// Total order used only to break exact ties between otherwise identical
    /// versions, so that reconciliation is argument-order independent.
    pub(crate) fn tie_key(&self) -> (u8, [u64; 3]) {
        fn bits(x: f64) -> u64 {
            // order-preserving map from f64 to u64
            let b = x.to_bits();
            if b >> 63 == 1 {
                !b
            } else {
                b | (1 << 63)
            }
        }
        match self {
            Value::Bool(b) => (0, [u64::from(*b), 0, 0]),
            Value::Scalar(s) => (1, [bits(*s), 0, 0]),
            Value::Color(c) => (2, [bits(c.r), bits(c.g), bits(c.b)]),
            Value::Position(p) => (3, [bits(p.x), bits(p.y), bits(p.z)]),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Scalar(s) => serializer.serialize_f64(*s),
            Value::Color(c) => {
                let mut st = serializer.serialize_struct("ColorRgb", 3)?;
                st.serialize_field("r", &c.r)?;
                st.serialize_field("g", &c.g)?;
                st.serialize_field("b", &c.b)?;
                st.end()
            }
            Value::Position(p) => {
                let mut st = serializer.serialize_struct("Vector3", 3)?;
                st.serialize_field("x", &p.x)?;
                st.serialize_field("y", &p.y)?;
                st.serialize_field("z", &p.z)?;
                st.end()
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ValueRepr {
    Bool(bool),
    Scalar(f64),
    Array([f64; 3]),
    Color(ColorRgb),
    Position(Vector3),
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ValueRepr::deserialize(deserializer).map_err(|_| {
            de::Error::custom("expected bool, number, {r,g,b} color or {x,y,z} position")
        })?;
        let value = match repr {
            ValueRepr::Bool(b) => Value::Bool(b),
            ValueRepr::Scalar(s) => Value::Scalar(s),
            ValueRepr::Color(c) => Value::Color(c),
            ValueRepr::Position(p) => Value::Position(p),
            ValueRepr::Array([x, y, z]) => Value::Position(Vector3::new(x, y, z)),
        };
        if !value.is_valid() {
            return Err(de::Error::custom("value out of range or not finite"));
        }
        Ok(value)
    }
}

/// One version of a variable: the unit of reconciliation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VersionedValue {
    pub value: Value,
    pub ts: Timestamp,
    pub origin: Origin,
    pub seq: u64,
}

impl VersionedValue {
    pub fn new(value: Value, ts: Timestamp, origin: Origin, seq: u64) -> Self {
        Self {
            value,
            ts,
            origin,
            seq,
        }
    }

    /// Identity of the version, ignoring the payload.
    pub fn version_key(&self) -> (Timestamp, u8, u64) {
        (self.ts, self.origin.priority(), self.seq)
    }
}

/// Named variables of one embodiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateSnapshot {
    pub vars: BTreeMap<String, VersionedValue>,
}

impl StateSnapshot {
    pub fn get(&self, var: &str) -> Option<&VersionedValue> {
        self.vars.get(var)
    }

    pub fn value(&self, var: &str) -> Option<Value> {
        self.vars.get(var).map(|v| v.value)
    }

    pub fn contains(&self, var: &str) -> bool {
        self.vars.contains_key(var)
    }

    /// Inserts or replaces a variable. Empty names are rejected.
    pub fn set(&mut self, var: &str, value: VersionedValue) -> bool {
        if var.is_empty() {
            return false;
        }
        self.vars.insert(var.to_string(), value);
        true
    }
}

/// A shared object with a virtual state and, optionally, a physical device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedMetaverseAgent {
    pub id: String,
    pub criteria: AgentCriteria,
    pub virtual_state: StateSnapshot,
    pub device: Option<String>,
    pub links: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    RgbToHsb,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarMapping {
    #[serde(rename = "virtual")]
    pub virtual_var: String,
    #[serde(rename = "physical")]
    pub physical_var: String,
    #[serde(default = "identity")]
    pub transform: Transform,
}

fn identity() -> Transform {
    Transform::Identity
}

/// Ties an agent's virtual variables to a device's physical variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncLink {
    pub id: String,
    pub agent_id: String,
    pub device_id: String,
    pub mode: LinkMode,
    pub mappings: Vec<VarMapping>,
}

impl SyncLink {
    pub fn mapping_for(&self, var: &str, origin: Origin) -> Option<(usize, &VarMapping)> {
        self.mappings.iter().enumerate().find(|(_, m)| match origin {
            Origin::Virtual => m.virtual_var == var,
            Origin::Physical => m.physical_var == var,
        })
    }
}

/// A broken consistency rule between an agent's criteria and its links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    VirtualOnlyDeviceBound,
    TwoWayRequiresDual,
    LinkOnVirtualOnly { link: String },
    LinkAgentMismatch { link: String },
    LinkNotListed { link: String },
    LinkModeNotAllowed { link: String, mode: LinkMode },
    TwoWayLinkRequiresDual { link: String },
    EmptyMappings { link: String },
    UnknownVirtualVar { link: String, var: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VirtualOnlyDeviceBound => {
                f.write_str("device-bound agent must not be VirtualOnly")
            }
            Violation::TwoWayRequiresDual => {
                f.write_str("TwoWay interaction requires Dual embodiment")
            }
            Violation::LinkOnVirtualOnly { link } => {
                write!(f, "link {link}: linked agent must not be VirtualOnly")
            }
            Violation::LinkAgentMismatch { link } => {
                write!(f, "link {link}: references a different agent")
            }
            Violation::LinkNotListed { link } => {
                write!(f, "link {link}: not listed on the agent")
            }
            Violation::LinkModeNotAllowed { link, mode } => {
                write!(f, "link {link}: mode {mode:?} not allowed by agent interaction")
            }
            Violation::TwoWayLinkRequiresDual { link } => {
                write!(f, "link {link}: TwoWay link requires Dual embodiment")
            }
            Violation::EmptyMappings { link } => write!(f, "link {link}: no mappings"),
            Violation::UnknownVirtualVar { link, var } => {
                write!(f, "link {link}: virtual var {var:?} not in agent state")
            }
        }
    }
}

fn interaction_allows(interaction: Interaction, mode: LinkMode) -> bool {
    match interaction {
        Interaction::None => false,
        Interaction::TwoWay => true,
        other => other == mode.as_interaction(),
    }
}

/// Checks criteria and link consistency. An empty list means the agent is valid.
pub fn validate_agent(agent: &ExtendedMetaverseAgent, links: &[SyncLink]) -> Vec<Violation> {
    let mut out = Vec::new();
    let c = agent.criteria;

    if agent.device.is_some() && c.embodiment == Embodiment::VirtualOnly {
        out.push(Violation::VirtualOnlyDeviceBound);
    }
    if c.interaction == Interaction::TwoWay && c.embodiment != Embodiment::Dual {
        out.push(Violation::TwoWayRequiresDual);
    }

    for link in links {
        let id = &link.id;
        if link.agent_id != agent.id {
            out.push(Violation::LinkAgentMismatch { link: id.clone() });
            continue;
        }
        if !agent.links.contains(id) {
            out.push(Violation::LinkNotListed { link: id.clone() });
        }
        if c.embodiment == Embodiment::VirtualOnly {
            out.push(Violation::LinkOnVirtualOnly { link: id.clone() });
        }
        if !interaction_allows(c.interaction, link.mode) {
            out.push(Violation::LinkModeNotAllowed {
                link: id.clone(),
                mode: link.mode,
            });
        }
        if link.mode == LinkMode::TwoWay && c.embodiment != Embodiment::Dual {
            out.push(Violation::TwoWayLinkRequiresDual { link: id.clone() });
        }
        if link.mappings.is_empty() {
            out.push(Violation::EmptyMappings { link: id.clone() });
        }
        for m in &link.mappings {
            if !agent.virtual_state.contains(&m.virtual_var) {
                out.push(Violation::UnknownVirtualVar {
                    link: id.clone(),
                    var: m.virtual_var.clone(),
                });
            }
        }
    }
    out
}
