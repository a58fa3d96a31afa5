use xri_wasm_demo::{explore, GalaxyDemo, LampDemo};

#[test]
fn explorer_reports_units() {
    let v = explore(1.0, 0.0, 0.0);
    assert_eq!(v["hsb"]["on"], true);
    assert_eq!(v["hsb"]["hue"], 0);
    assert_eq!(v["hsb"]["sat"], 254);
    assert_eq!(v["hsb"]["bri"], 254);
    assert!(v["error"].as_f64().unwrap() < 1.0 / 254.0 + 1e-9);
    assert_eq!(explore(0.0, 0.0, 0.0)["hsb"]["on"], false);
}

#[test]
fn lamp_seat_and_button() {
    let mut lamp = LampDemo::create().unwrap();
    lamp.move_bulb(0.0, 1.0, 0.0).unwrap();
    lamp.step_ticks(4).unwrap();
    let s = lamp.state();
    assert_eq!(s["virtual_power"], true);
    assert_eq!(s["plug_on"], true);

    lamp.press_button().unwrap();
    lamp.step_ticks(4).unwrap();
    let s = lamp.state();
    assert_eq!(s["plug_on"], false);
    assert_eq!(s["virtual_power"], false);
    assert_eq!(s["noise"], 0.0);
}

#[test]
fn galaxy_hit_recolors_bulbs() {
    let mut g = GalaxyDemo::create().unwrap();
    g.step_ticks(2).unwrap();
    let before = g.state()["device_commands"].as_u64().unwrap();
    g.goto_planet(0).unwrap();
    g.step_ticks(4).unwrap();
    let s = g.state();
    assert_eq!(s["device_commands"].as_u64().unwrap() - before, 4);
    assert_eq!(s["rocket"]["color"]["r"], 1.0);
    for b in s["bulbs"].as_array().unwrap() {
        assert_eq!(b["hsb"]["hue"], 0, "{b}");
        assert_eq!(b["hsb"]["sat"], 254, "{b}");
    }
    assert_eq!(s["planets"].as_array().unwrap().len(), 5);
    assert!(g.goto_planet(99).is_err());
}
