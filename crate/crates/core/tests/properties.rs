mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use xri_core::model::{
    hsb_to_rgb, rgb_to_hsb, ColorHsb, ColorRgb, LinkMode, Origin, SyncLink, Timestamp, Transform, Value, VarMapping,
    VersionedValue, BRI_MAX, BRI_MIN, SAT_MAX,
};
use xri_core::sync::{reconcile, values_agree, Command, CommandTarget, SyncEngine, UpdateEvent, COLOR_TOLERANCE};

use common::{hsv_oracle, hue_distance, unit};

fn color() -> impl Strategy<Value = ColorRgb> {
    (unit(), unit(), unit()).prop_map(|(r, g, b)| ColorRgb::new(r, g, b))
}

fn version() -> impl Strategy<Value = VersionedValue> {
    (
        prop_oneof![Just(false), Just(true)],
        0u64..4,
        prop_oneof![Just(Origin::Virtual), Just(Origin::Physical)],
        0u64..4,
    )
        .prop_map(|(b, ts, origin, seq)| VersionedValue::new(Value::Bool(b), Timestamp(ts * 50), origin, seq))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn hsb_round_trip_within_one_step(c in color()) {
        let back = hsb_to_rgb(rgb_to_hsb(c));
        prop_assert!(c.max_channel_diff(&back) <= COLOR_TOLERANCE + 1e-9, "{c:?} -> {back:?}");
    }

    #[test]
    fn hsb_ranges(c in color()) {
        let h = rgb_to_hsb(c);
        prop_assert!(h.sat <= SAT_MAX);
        prop_assert!((BRI_MIN..=BRI_MAX).contains(&h.bri));
        prop_assert!(h.is_valid());
    }

    #[test]
    fn hsb_matches_oracle(c in color()) {
        let h = rgb_to_hsb(c);
        let (on, hue, sat, bri) = hsv_oracle(c.r, c.g, c.b);
        prop_assert_eq!(h.on, on);
        if on {
            prop_assert!(hue_distance(u32::from(h.hue), hue) <= 1, "{c:?}: {} vs {hue}", h.hue);
            prop_assert!(u32::from(h.sat).abs_diff(sat) <= 1);
            prop_assert!(u32::from(h.bri).abs_diff(bri) <= 1);
        }
    }

    // Reds just below a full turn wrap to hue 0, never overflow.
    #[test]
    fn hue_wraps_near_red(eps in 0.0..1e-5f64) {
        let h = rgb_to_hsb(ColorRgb::new(1.0, 0.0, eps));
        prop_assert!(hue_distance(u32::from(h.hue), 0) <= 1);
        let h = rgb_to_hsb(ColorRgb::new(1.0, eps, 0.0));
        prop_assert!(hue_distance(u32::from(h.hue), 0) <= 1);
    }

    #[test]
    fn reconcile_is_a_total_order(a in version(), b in version(), c in version()) {
        let ab = reconcile(&a, &b).unwrap();
        prop_assert_eq!(ab, reconcile(&b, &a).unwrap());
        prop_assert_eq!(reconcile(&a, &a).unwrap(), a);
        prop_assert_eq!(
            reconcile(&ab, &c).unwrap(),
            reconcile(&a, &reconcile(&b, &c).unwrap()).unwrap()
        );
        // winner dominates on (ts, physical-over-virtual, seq)
        let key = |v: &VersionedValue| (v.ts, v.origin == Origin::Physical, v.seq);
        prop_assert!(key(&ab) >= key(&a) && key(&ab) >= key(&b));
    }

    #[test]
    fn reconcile_rejects_mixed_kinds(a in version(), x in -1.0..1.0f64) {
        let b = VersionedValue::new(Value::Scalar(x), a.ts, a.origin, a.seq);
        prop_assert!(reconcile(&a, &b).is_err());
    }
}

#[derive(Debug, Clone)]
enum Op {
    Virtual(ColorRgb),
    Physical(ColorRgb),
    Deliver(usize),
    Fail(usize),
    Tick,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => color().prop_map(Op::Virtual),
        2 => color().prop_map(Op::Physical),
        4 => any::<usize>().prop_map(Op::Deliver),
        1 => any::<usize>().prop_map(Op::Fail),
        2 => Just(Op::Tick),
    ]
}

struct Sim {
    engine: SyncEngine,
    scene: ColorRgb,
    bulb: ColorHsb,
    pending: Vec<Command>,
    ts: u64,
    seq: [u64; 2],
}

const LINK: &str = "ambient";

impl Sim {
    fn new(start: ColorRgb) -> Self {
        let mut engine = SyncEngine::new();
        let link = SyncLink {
            id: LINK.into(),
            agent_id: "rocket".into(),
            device_id: "bulb-1".into(),
            mode: LinkMode::TwoWay,
            mappings: vec![VarMapping {
                virtual_var: "color".into(),
                physical_var: "color".into(),
                transform: Transform::RgbToHsb,
            }],
        };
        engine
            .register(link, &BTreeMap::from([("color".to_string(), Value::Color(start))]))
            .unwrap();
        let mut sim = Sim {
            engine,
            scene: start,
            bulb: rgb_to_hsb(ColorRgb::BLACK),
            pending: Vec::new(),
            ts: 0,
            seq: [0, 0],
        };
        sim.pending.extend(sim.engine.resync());
        sim
    }

    fn update(&mut self, origin: Origin, c: ColorRgb) {
        let i = usize::from(origin == Origin::Physical);
        self.seq[i] += 1;
        let e = UpdateEvent {
            link_id: LINK.into(),
            var: "color".into(),
            value: VersionedValue::new(Value::Color(c), Timestamp(self.ts), origin, self.seq[i]),
        };
        self.pending.extend(self.engine.ingest_update(&e).unwrap());
    }

    fn deliver(&mut self, i: usize, ok: bool) {
        if self.pending.is_empty() {
            return;
        }
        let cmd = self.pending.remove(i % self.pending.len());
        let applied = if !ok {
            None
        } else {
            let c = cmd.value.as_color().unwrap();
            match cmd.target {
                CommandTarget::SceneClients => {
                    self.scene = c;
                    Some(Value::Color(c))
                }
                CommandTarget::Device => {
                    self.bulb = rgb_to_hsb(c);
                    Some(Value::Color(hsb_to_rgb(self.bulb)))
                }
            }
        };
        self.pending.extend(self.engine.ack(&cmd, applied).unwrap());
    }

    fn apply(&mut self, op: &Op) {
        match op {
            Op::Virtual(c) => {
                self.scene = *c;
                self.update(Origin::Virtual, *c);
            }
            Op::Physical(c) => {
                self.bulb = rgb_to_hsb(*c);
                self.update(Origin::Physical, hsb_to_rgb(self.bulb));
            }
            Op::Deliver(i) => self.deliver(*i, true),
            Op::Fail(i) => self.deliver(*i, false),
            Op::Tick => {
                self.ts += 50;
                self.pending.extend(self.engine.resync());
            }
        }
    }

    fn quiesce(&mut self) {
        for _ in 0..100 {
            self.ts += 50;
            self.pending.extend(self.engine.resync());
            if self.pending.is_empty() {
                return;
            }
            while !self.pending.is_empty() {
                self.deliver(0, true);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    // Reordered, failing deliveries and concurrent edits on both sides of a
    // two-way color link still settle on one color.
    #[test]
    fn two_way_color_link_converges(start in color(), ops in prop::collection::vec(op(), 0..80)) {
        let mut sim = Sim::new(start);
        for op in &ops {
            sim.apply(op);
        }
        sim.quiesce();
        prop_assert!(sim.pending.is_empty());
        let bulb = hsb_to_rgb(sim.bulb);
        prop_assert!(
            values_agree(&Value::Color(sim.scene), &Value::Color(bulb), Transform::RgbToHsb),
            "scene {:?} bulb {:?}", sim.scene, sim.bulb
        );
        let link = sim.engine.link(LINK).unwrap();
        prop_assert!(link.believed_coherent());
        let winner = link.winner("color").unwrap().value;
        prop_assert!(values_agree(&winner, &Value::Color(sim.scene), Transform::RgbToHsb));
    }
}
