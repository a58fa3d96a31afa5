//! Browser bindings over the hub's deterministic world. Everything runs in
//! process against the built-in emulators; nothing touches the network.

use serde_json::{json, Value as Json};
use wasm_bindgen::prelude::*;
use xri_core::config::ScenarioConfig;
use xri_core::device::LocalDevices;
use xri_core::model::{hsb_to_rgb, rgb_to_hsb, ColorHsb, ColorRgb, Timestamp, Value, Vector3};
use xri_core::wire::HubBackend;
use xri_core::world::{local_devices, LogKind, World};

pub const LAMP_TOML: &str = include_str!("../../../scenarios/lamp.toml");
pub const GALAXY_TOML: &str = include_str!("../../../scenarios/galaxy.toml");

const SESSION: &str = "browser";

fn hsb_json(h: ColorHsb) -> Json {
    json!({ "on": h.on, "hue": h.hue, "sat": h.sat, "bri": h.bri })
}

fn rgb_json(c: ColorRgb) -> Json {
    json!({ "r": c.r, "g": c.g, "b": c.b })
}

fn pos_json(p: Vector3) -> Json {
    json!({ "x": p.x, "y": p.y, "z": p.z })
}

/// Bridge units for an RGB color and the color they render back to.
pub fn explore(r: f64, g: f64, b: f64) -> Json {
    let c = ColorRgb::new(r, g, b);
    let hsb = rgb_to_hsb(c);
    let back = hsb_to_rgb(hsb);
    json!({ "hsb": hsb_json(hsb), "back": rgb_json(back), "error": c.max_channel_diff(&back) })
}

#[wasm_bindgen(js_name = rgbToHsb)]
pub fn rgb_to_hsb_json(r: f64, g: f64, b: f64) -> String {
    explore(r, g, b).to_string()
}

/// A world plus its in-process devices, stepped one tick at a time.
pub struct Sim {
    world: World,
    devices: LocalDevices,
}

impl Sim {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, String> {
        let cfg = ScenarioConfig::parse(text, origin).map_err(|e| e.to_string())?;
        let devices = local_devices(&cfg);
        let mut world = World::new(cfg, 0).map_err(|e| e.to_string())?;
        // a browser tab may run for hours
        world.set_log_samples(false);
        Ok(Self { world, devices })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn devices(&self) -> &LocalDevices {
        &self.devices
    }

    pub fn set(&mut self, agent: &str, var: &str, value: Value) -> Result<(), String> {
        self.world
            .client_update(SESSION, agent, var, value)
            .map_err(|e| e.to_string())
    }

    pub fn press(&mut self, plug: &str) -> Result<(), String> {
        let now = self.world.now();
        let p = self.devices.plugs.get_mut(plug).ok_or_else(|| format!("no plug {plug:?}"))?;
        p.press_button(now);
        Ok(())
    }

    pub fn step(&mut self, ticks: u32) -> Result<(), String> {
        for _ in 0..ticks {
            let now = self.world.now();
            let world = &mut self.world;
            for plug in self.devices.plugs.values_mut() {
                plug.flush(now, |ev| world.receive_device_event(ev.clone()));
            }
            self.world.run_tick(&mut self.devices).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn noise(&self, link: &str) -> f64 {
        let end = Timestamp(self.world.now().0.max(1));
        self.world
            .coherence_report(link, (Timestamp(0), end))
            .map(|r| r.noise_score)
            .unwrap_or(0.0)
    }

    pub fn device_commands(&self) -> usize {
        self.world
            .log()
            .iter()
            .filter(|r| r.kind == LogKind::Command && r.side == "device")
            .count()
    }

    fn virtual_value(&self, agent: &str, var: &str) -> Option<Value> {
        self.world.agent(agent)?.virtual_state.value(var)
    }
}

/// Two-way lamp: move the virtual bulb, press the physical button.
#[wasm_bindgen]
pub struct LampDemo {
    sim: Sim,
}

impl LampDemo {
    pub fn create() -> Result<Self, String> {
        let sim = Sim::from_toml(LAMP_TOML, "lamp.toml")?;
        if sim.world.config().lamp.is_none() {
            return Err("scenario has no lamp".into());
        }
        Ok(Self { sim })
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    fn lamp(&self) -> &xri_core::config::LampScenario {
        self.sim.world.config().lamp.as_ref().expect("checked in create")
    }

    pub fn move_bulb(&mut self, x: f64, y: f64, z: f64) -> Result<(), String> {
        let (agent, var) = (self.lamp().agent.clone(), self.lamp().bulb_var.clone());
        self.sim.set(&agent, &var, Value::Position(Vector3::new(x, y, z)))
    }

    pub fn set_power(&mut self, on: bool) -> Result<(), String> {
        let (agent, var) = (self.lamp().agent.clone(), self.lamp().power_var.clone());
        self.sim.set(&agent, &var, Value::Bool(on))
    }

    pub fn press_button(&mut self) -> Result<(), String> {
        let plug = self.lamp().plug.clone();
        self.sim.press(&plug)
    }

    pub fn step_ticks(&mut self, ticks: u32) -> Result<(), String> {
        self.sim.step(ticks)
    }

    pub fn state(&self) -> Json {
        let lamp = self.lamp();
        let bulb = self.sim.virtual_value(&lamp.agent, &lamp.bulb_var).and_then(|v| v.as_position());
        let power = self.sim.virtual_value(&lamp.agent, &lamp.power_var).and_then(|v| v.as_bool());
        let plug = self.sim.devices.plugs.get(&lamp.plug).map(|p| p.state().on);
        let link = self.sim.world.config().links.first().map(|l| l.id.clone()).unwrap_or_default();
        json!({
            "t_ms": self.sim.world.now().0,
            "socket": pos_json(lamp.socket_pos),
            "socket_radius": lamp.socket_radius,
            "bulb": bulb.map(pos_json),
            "virtual_power": power,
            "plug_on": plug,
            "noise": self.sim.noise(&link),
            "device_commands": self.sim.device_commands(),
        })
    }
}

#[wasm_bindgen]
impl LampDemo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<LampDemo, JsError> {
        Self::create().map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = moveBulb)]
    pub fn js_move_bulb(&mut self, x: f64, y: f64, z: f64) -> Result<(), JsError> {
        self.move_bulb(x, y, z).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = setPower)]
    pub fn js_set_power(&mut self, on: bool) -> Result<(), JsError> {
        self.set_power(on).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = pressButton)]
    pub fn js_press_button(&mut self) -> Result<(), JsError> {
        self.press_button().map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = step)]
    pub fn js_step(&mut self, ticks: u32) -> Result<(), JsError> {
        self.step_ticks(ticks).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = stateJson)]
    pub fn state_json(&self) -> String {
        self.state().to_string()
    }
}

/// Rocket among orbiting planets; hits recolor four bulbs.
#[wasm_bindgen]
pub struct GalaxyDemo {
    sim: Sim,
}

impl GalaxyDemo {
    pub fn create() -> Result<Self, String> {
        let sim = Sim::from_toml(GALAXY_TOML, "galaxy.toml")?;
        if sim.world.config().galaxy.is_none() {
            return Err("scenario has no galaxy".into());
        }
        Ok(Self { sim })
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    fn galaxy(&self) -> &xri_core::config::GalaxyScenario {
        self.sim.world.config().galaxy.as_ref().expect("checked in create")
    }

    pub fn move_rocket(&mut self, x: f64, y: f64, z: f64) -> Result<(), String> {
        let r = &self.galaxy().rocket;
        let (agent, var) = (r.agent.clone(), r.pos_var.clone());
        self.sim.set(&agent, &var, Value::Position(Vector3::new(x, y, z)))
    }

    /// Puts the rocket where planet `index` will be at the next tick.
    pub fn goto_planet(&mut self, index: usize) -> Result<(), String> {
        let now = self.sim.world.now();
        let p = self
            .sim
            .world
            .planet_position_at(index, now)
            .ok_or_else(|| format!("no planet {index}"))?;
        self.move_rocket(p.x, p.y, p.z)
    }

    pub fn step_ticks(&mut self, ticks: u32) -> Result<(), String> {
        self.sim.step(ticks)
    }

    pub fn state(&self) -> Json {
        let g = self.galaxy();
        let planets: Vec<Json> = g
            .planets
            .iter()
            .zip(self.sim.world.planet_positions())
            .map(|(p, pos)| {
                json!({ "name": p.name, "pos": pos_json(*pos), "radius": p.radius, "color": rgb_json(p.color) })
            })
            .collect();
        let bulbs: Vec<Json> = g
            .bulbs
            .iter()
            .filter_map(|id| {
                let light = self.sim.world.device(id)?.light?;
                let hsb: ColorHsb = self.sim.devices.bridge.light(light)?.into();
                Some(json!({ "id": id, "hsb": hsb_json(hsb), "rgb": rgb_json(hsb_to_rgb(hsb)) }))
            })
            .collect();
        let r = &g.rocket;
        let pos = self.sim.virtual_value(&r.agent, &r.pos_var).and_then(|v| v.as_position());
        let color = self.sim.virtual_value(&r.agent, &r.color_var).and_then(|v| v.as_color());
        json!({
            "t_ms": self.sim.world.now().0,
            "sun": pos_json(g.sun_pos),
            "planets": planets,
            "rocket": { "pos": pos.map(pos_json), "radius": r.radius, "color": color.map(rgb_json) },
            "bulbs": bulbs,
            "device_commands": self.sim.device_commands(),
        })
    }
}

#[wasm_bindgen]
impl GalaxyDemo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<GalaxyDemo, JsError> {
        Self::create().map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = moveRocket)]
    pub fn js_move_rocket(&mut self, x: f64, y: f64, z: f64) -> Result<(), JsError> {
        self.move_rocket(x, y, z).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = gotoPlanet)]
    pub fn js_goto_planet(&mut self, index: usize) -> Result<(), JsError> {
        self.goto_planet(index).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = step)]
    pub fn js_step(&mut self, ticks: u32) -> Result<(), JsError> {
        self.step_ticks(ticks).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = stateJson)]
    pub fn state_json(&self) -> String {
        self.state().to_string()
    }
}
