#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;
use xri_core::model::{ColorRgb, Origin, Timestamp, Value, Vector3};
use xri_core::sync::{CommandTarget, RelationshipClass};
use xri_core::wire::{
    AckPayload, AgentFilter, CoherencePayload, CommandPayload, ErrorCode, ErrorPayload, EventPayload, Frame,
    HelloPayload, Payload, StateUpdatePayload, SubscribePayload,
};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares against a golden file. `XRI_BLESS=1` rewrites it instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("XRI_BLESS").is_some() {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs:\n--- expected\n{expected}\n--- actual\n{actual}"))
    }
}

// --- colour oracle ---------------------------------------------------------

/// HSV in bridge units, found by ordering the channels and walking the hue
/// hexagon edge they select. Returns `(on, hue, sat, bri)`.
pub fn hsv_oracle(r: f64, g: f64, b: f64) -> (bool, u32, u32, u32) {
    let mut ch = [(r, 0u8), (g, 1), (b, 2)];
    ch.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, mid, hi) = (ch[0], ch[1], ch[2]);
    let max = hi.0;
    let d = hi.0 - lo.0;
    if max <= 0.0 {
        return (false, 0, 0, 1);
    }
    let hue = if d <= 0.0 {
        0
    } else {
        let frac = mid.0 - lo.0;
        // sixths of a turn, times d
        let sixths = match (hi.1, lo.1) {
            (0, 2) => frac,
            (1, 2) => 2.0 * d - frac,
            (1, 0) => 2.0 * d + frac,
            (2, 0) => 4.0 * d - frac,
            (2, 1) => 4.0 * d + frac,
            (0, 1) => 6.0 * d - frac,
            _ => unreachable!(),
        };
        (sixths / (6.0 * d) * 65535.0).round() as u32 % 65536
    };
    let sat = (d / max * 254.0).round() as u32;
    let bri = (max * 254.0).round().max(1.0) as u32;
    (true, hue, sat, bri)
}

pub fn hue_distance(a: u32, b: u32) -> u32 {
    let d = a.abs_diff(b);
    d.min(65536 - d)
}

// --- frame generators -------------------------------------------------------

pub fn unit() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64]
}

pub fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(0.0),
        Just(-0.0),
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
    ]
}

pub fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<bool>().prop_map(Value::Bool),
        finite().prop_map(Value::Scalar),
        (unit(), unit(), unit()).prop_map(|(r, g, b)| Value::Color(ColorRgb::new(r, g, b))),
        (finite(), finite(), finite()).prop_map(|(x, y, z)| Value::Position(Vector3::new(x, y, z))),
    ]
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_\\-/]{0,12}"
}

fn text() -> impl Strategy<Value = String> {
    prop_oneof!["[ -~]{0,24}", "\\PC{0,12}"]
}

fn origin() -> impl Strategy<Value = Origin> {
    prop_oneof![Just(Origin::Virtual), Just(Origin::Physical)]
}

fn class() -> impl Strategy<Value = RelationshipClass> {
    prop::sample::select(RelationshipClass::ALL.to_vec())
}

fn error_code() -> impl Strategy<Value = ErrorCode> {
    prop::sample::select(vec![
        ErrorCode::BadFrame,
        ErrorCode::BadVersion,
        ErrorCode::StaleSeq,
        ErrorCode::UnknownType,
        ErrorCode::NoHello,
        ErrorCode::UnknownAgent,
        ErrorCode::UnknownVar,
        ErrorCode::Unsupported,
    ])
}

fn coherence() -> impl Strategy<Value = CoherencePayload> {
    (ident(), 0u64..1_000_000, prop::collection::vec(0u64..10_000, 0..8), unit()).prop_map(
        |(link, start, mut cuts, noise)| {
            cuts.sort_unstable();
            let end = start + cuts.last().copied().unwrap_or(0) + 50;
            let spans = cuts
                .chunks_exact(2)
                .map(|c| (Timestamp(start + c[0]), Timestamp(start + c[1])))
                .collect();
            CoherencePayload {
                link,
                window: (Timestamp(start), Timestamp(end)),
                spans,
                noise_score: noise,
            }
        },
    )
}

pub fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        text().prop_map(|client| Payload::Hello(HelloPayload { client })),
        (
            prop_oneof![
                Just(AgentFilter::Wildcard),
                prop::collection::btree_set(ident(), 1..4).prop_map(AgentFilter::Agents)
            ],
            prop::collection::btree_set(class(), 0..3)
        )
            .prop_map(|(agents, classes): (AgentFilter, BTreeSet<_>)| Payload::Subscribe(SubscribePayload {
                agents,
                classes
            })),
        (ident(), value()).prop_map(|(var, value)| Payload::StateUpdate(StateUpdatePayload { var, value })),
        (
            prop_oneof![Just(CommandTarget::Device), Just(CommandTarget::SceneClients)],
            ident(),
            ident(),
            value()
        )
            .prop_map(|(target, scope, var, value)| Payload::Command(CommandPayload {
                target,
                scope,
                var,
                value
            })),
        (ident(), value(), origin(), any::<u64>(), class(), text()).prop_map(
            |(var, value, origin, ts, class, source)| Payload::Event(EventPayload {
                var,
                value,
                origin,
                hub_ts: Timestamp(ts),
                class,
                source
            })
        ),
        coherence().prop_map(Payload::CoherenceReport),
        (error_code(), text()).prop_map(|(code, message)| Payload::Error(ErrorPayload { code, message })),
        any::<u64>().prop_map(|ack_seq| Payload::Ack(AckPayload { ack_seq })),
    ]
}

pub fn frame() -> impl Strategy<Value = Frame> {
    (any::<u64>(), any::<u64>(), prop::option::of(ident()), payload())
        .prop_map(|(seq, ts, agent, payload)| Frame::new(seq, Timestamp(ts), agent, payload))
}
