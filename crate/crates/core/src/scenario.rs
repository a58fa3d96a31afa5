//! Scenario rules: lamp socket, orbiting planets, ambient lighting.

use crate::config::Planet;
use crate::model::{ColorRgb, Vector3, VersionedValue};
use crate::sync::{Command, SyncEngine, SyncError, UpdateEvent};

pub const DEFAULT_TICK_MS: u64 = 50;

/// Fixed-step simulation clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickClock {
    pub tick: u64,
    pub dt_ms: u64,
}

impl Default for TickClock {
    fn default() -> Self {
        Self::new(DEFAULT_TICK_MS)
    }
}

impl TickClock {
    pub fn new(dt_ms: u64) -> Self {
        assert!(dt_ms > 0, "tick length must be positive");
        Self { tick: 0, dt_ms }
    }

    pub fn now_ms(&self) -> u64 {
        self.tick * self.dt_ms
    }

    pub fn dt_seconds(&self) -> f64 {
        self.dt_ms as f64 / 1000.0
    }

    pub fn advance(&mut self) {
        self.tick += 1;
    }

    /// First tick whose start time is at or after `ms`.
    pub fn tick_at(&self, ms: u64) -> u64 {
        ms.div_ceil(self.dt_ms)
    }
}

/// True when the bulb sits inside the socket volume.
pub fn socket_test(bulb: Vector3, socket: Vector3, radius: f64) -> bool {
    bulb.distance(socket) < radius
}

/// A button press reported by the lamp's plug.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ButtonPress {
    pub press_seq: u64,
    /// Plug power after the press.
    pub on: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerIntent {
    /// The virtual bulb entered (true) or left (false) the socket.
    Seat(bool),
    /// Someone pressed the physical button.
    Button(ButtonPress),
}

/// Power changes implied by one tick of the lamp scene. Seat intents fire
/// only on edges; every button press yields one intent, in order.
pub fn lamp_transition(prev_seated: bool, seated: bool, presses: &[ButtonPress]) -> Vec<PowerIntent> {
    let mut out = Vec::with_capacity(presses.len() + 1);
    if prev_seated != seated {
        out.push(PowerIntent::Seat(seated));
    }
    out.extend(presses.iter().copied().map(PowerIntent::Button));
    out
}

/// Rotates `v` by `angle` radians about the +Y axis (counter-clockwise seen
/// from above).
pub fn rotate_y(v: Vector3, angle: f64) -> Vector3 {
    let (s, c) = angle.sin_cos();
    Vector3::new(v.x * c + v.z * s, v.y, -v.x * s + v.z * c)
}

/// Position of a planet `elapsed_s` seconds after its configured start.
pub fn orbit_position(planet: &Planet, sun: Vector3, elapsed_s: f64) -> Vector3 {
    sun.add(rotate_y(planet.pos.sub(sun), planet.omega * elapsed_s))
}

/// Advances every planet by one step of `dt_s` seconds about the sun's
/// vertical axis.
pub fn orbit_step(positions: &mut [Vector3], planets: &[Planet], sun: Vector3, dt_s: f64) {
    for (pos, planet) in positions.iter_mut().zip(planets) {
        *pos = sun.add(rotate_y(pos.sub(sun), planet.omega * dt_s));
    }
}

/// Sphere overlap, strict.
pub fn collision_test(a: Vector3, ra: f64, b: Vector3, rb: f64) -> bool {
    a.distance(b) < ra + rb
}

/// Tracks which planets the rocket is inside and reports new entries.
#[derive(Debug, Clone, Default)]
pub struct CollisionTracker {
    inside: Vec<bool>,
}

impl CollisionTracker {
    pub fn new(planets: usize) -> Self {
        Self {
            inside: vec![false; planets],
        }
    }

    /// Index of the planet entered this tick. With several simultaneous
    /// entries the lowest index wins.
    pub fn update(&mut self, rocket: Vector3, rocket_radius: f64, planets: &[Planet], positions: &[Vector3]) -> Option<usize> {
        let mut entered = None;
        for (i, (p, pos)) in planets.iter().zip(positions).enumerate() {
            let hit = collision_test(rocket, rocket_radius, *pos, p.radius);
            if hit && !self.inside[i] && entered.is_none() {
                entered = Some(i);
            }
            self.inside[i] = hit;
        }
        entered
    }
}

pub fn pick_color(planet: &Planet) -> ColorRgb {
    planet.color
}

/// Feeds a new rocket color into every ambient link and collects the bulb
/// commands.
pub fn propagate_ambient(
    engine: &mut SyncEngine,
    color_var: &str,
    color: VersionedValue,
    links: &[String],
) -> Result<Vec<Command>, SyncError> {
    let mut out = Vec::new();
    for link in links {
        out.extend(engine.ingest_update(&UpdateEvent {
            link_id: link.clone(),
            var: color_var.to_string(),
            value: color,
        })?);
    }
    Ok(out)
}
