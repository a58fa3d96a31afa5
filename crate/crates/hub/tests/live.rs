use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Kills the child if the test bails out early.
struct Proc {
    child: Child,
    stdout: BufReader<ChildStdout>,
}

impl Proc {
    fn spawn(args: &[&str]) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_xri-hub"))
            .args(["--log-level", "warn"])
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let stdout = BufReader::new(child.stdout.take().unwrap());
        Proc { child, stdout }
    }

    fn line(&mut self) -> String {
        let mut s = String::new();
        self.stdout.read_line(&mut s).unwrap();
        s
    }

    fn interrupt(&mut self) -> i32 {
        let pid = self.child.id().to_string();
        Command::new("kill").args(["-INT", &pid]).status().unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if let Some(st) = self.child.try_wait().unwrap() {
                return st.code().unwrap_or(-1);
            }
            assert!(Instant::now() < deadline, "no exit after SIGINT");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Ports {
    hub: u16,
    tcp: u16,
    plug: u16,
}

fn serve_lamp(metrics: &std::path::Path) -> (Proc, Ports) {
    let p = Ports {
        hub: free_port(),
        tcp: free_port(),
        plug: free_port(),
    };
    let scenario = root().join("scenarios/lamp.toml");
    let mut proc = Proc::spawn(&[
        "serve",
        "--scenario",
        scenario.to_str().unwrap(),
        "--listen",
        &format!("127.0.0.1:{}", p.hub),
        "--tcp-listen",
        &format!("127.0.0.1:{}", p.tcp),
        "--plug-port",
        &p.plug.to_string(),
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    let first = proc.line();
    assert!(first.starts_with("hub listening on"), "{first}");
    (proc, p)
}

fn frame(seq: u64, kind: &str, agent: Option<&str>, payload: Value) -> String {
    json!({"v": 1, "type": kind, "seq": seq, "ts": 0, "agent": agent, "payload": payload}).to_string()
}

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(2))
        .build()
        .unwrap()
}

fn body_json(r: reqwest::blocking::Response) -> Value {
    serde_json::from_str(&r.text().unwrap()).unwrap()
}

/// Reads frames until `pred` matches or the deadline passes.
fn wait_for(lines: &mut impl Iterator<Item = Value>, pred: impl Fn(&Value) -> bool) -> Value {
    for v in lines {
        if pred(&v) {
            return v;
        }
    }
    panic!("frame never arrived");
}

fn is_event(v: &Value, var: &str, value: bool) -> bool {
    v["type"] == "event" && v["payload"]["var"] == var && v["payload"]["value"] == value
}

#[test]
fn tcp_session_press_and_sigint() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("live.csv");
    let (mut proc, ports) = serve_lamp(&metrics);
    let http = client();

    let stream = TcpStream::connect(("127.0.0.1", ports.tcp)).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut frames = BufReader::new(stream)
        .lines()
        .map_while(Result::ok)
        .map(|l| serde_json::from_str::<Value>(&l).unwrap());

    writeln!(w, "{}", frame(1, "hello", None, json!({"client": "test"}))).unwrap();
    writeln!(w, "{}", frame(2, "subscribe", None, json!({"agents": "*"}))).unwrap();
    let seat = json!({"var": "bulb_pos", "value": {"x": 0.0, "y": 1.0, "z": 0.0}});
    writeln!(w, "{}", frame(3, "state_update", Some("lamp"), seat)).unwrap();
    let ack = wait_for(&mut frames, |v| v["type"] == "ack" && v["payload"]["ack_seq"] == 3);
    assert_eq!(ack["v"], 1);

    // seating the bulb switches the plug on
    wait_for(&mut frames, |v| is_event(v, "plug-1/power", true));
    let state: Value = http
        .get(format!("http://127.0.0.1:{}/state", ports.plug))
        .send()
        .map(body_json)
        .unwrap();
    assert_eq!(state["on"], true);

    // the physical button turns the virtual lamp off through the callback
    let pressed: Value = http
        .post(format!("http://127.0.0.1:{}/press", ports.plug))
        .send()
        .map(body_json)
        .unwrap();
    assert_eq!(pressed["on"], false);
    let ev = wait_for(&mut frames, |v| is_event(v, "power", false));
    assert_eq!(ev["payload"]["origin"], "physical");

    // a bad frame gets an error and the session stays usable
    writeln!(w, "{{\"v\":1,\"type\":").unwrap();
    let err = wait_for(&mut frames, |v| v["type"] == "error");
    assert_eq!(err["payload"]["code"], "bad_frame");
    writeln!(w, "{}", frame(4, "state_update", Some("toaster"), json!({"var": "power", "value": true}))).unwrap();
    let err = wait_for(&mut frames, |v| v["type"] == "error");
    assert_eq!(err["payload"]["code"], "unknown_agent");

    assert_eq!(proc.interrupt(), 0);
    let log = std::fs::read_to_string(&metrics).unwrap();
    assert!(log.starts_with("ts_ms,tick,kind,link,scope,var,side,value,detail\n"));
    assert!(log.contains(",sample,lamp-power,"));
    let mut rest = String::new();
    while proc.stdout.read_line(&mut rest).unwrap() > 0 {}
    assert!(rest.contains("lamp-power: noise"), "{rest}");
}

#[test]
fn device_event_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (mut proc, ports) = serve_lamp(&dir.path().join("m.csv"));
    let http = client();
    let url = format!("http://127.0.0.1:{}/events", ports.hub);

    let r = http.post(&url).body("not json").send().unwrap();
    assert_eq!(r.status().as_u16(), 400);

    let body = r#"{"device":"plug-1","var":"power","value":true,"press_seq":1}"#;
    let r = http.post(&url).body(body).send().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.text().unwrap(), r#"{"accepted":true}"#);

    let health: Value = http
        .get(format!("http://127.0.0.1:{}/health", ports.hub))
        .send()
        .map(body_json)
        .unwrap();
    assert_eq!(health["scenario"], "lamp");
    assert_eq!(proc.interrupt(), 0);
}

#[tokio::test]
async fn websocket_session() {
    let dir = tempfile::tempdir().unwrap();
    let (mut proc, ports) = serve_lamp(&dir.path().join("m.csv"));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://127.0.0.1:{}/ws", ports.hub))
        .await
        .unwrap();
    ws.send(Message::text(frame(1, "hello", None, json!({"client": "ws"})))).await.unwrap();
    ws.send(Message::text(frame(2, "subscribe", None, json!({"agents": ["lamp"]}))))
        .await
        .unwrap();
    ws.send(Message::text(frame(3, "state_update", Some("lamp"), json!({"var": "power", "value": true}))))
        .await
        .unwrap();

    let mut got_ack = false;
    let mut got_event = false;
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while !(got_ack && got_event) {
        let msg = tokio::time::timeout_at(deadline, ws.next()).await.expect("timed out").unwrap().unwrap();
        let Message::Text(text) = msg else { continue };
        let v: Value = serde_json::from_str(text.as_str()).unwrap();
        got_ack |= v["type"] == "ack" && v["payload"]["ack_seq"] == 3;
        got_event |= is_event(&v, "plug-1/power", true);
    }
    ws.close(None).await.unwrap();
    assert_eq!(proc.interrupt(), 0);
}

/// Splits the emulator golden transcript into (request, "status body").
fn golden_exchanges() -> Vec<(String, String)> {
    let text = std::fs::read_to_string(root().join("crates/core/tests/golden/emulators.txt")).unwrap();
    text.split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|b| {
            let (req, resp) = b.split_once('\n').unwrap();
            (req.to_string(), resp.to_string())
        })
        .collect()
}

fn expect_bytes(golden: &[(String, String)], req: &str, resp: reqwest::blocking::Response) {
    let want = &golden.iter().find(|(r, _)| r == req).unwrap_or_else(|| panic!("no golden {req}")).1;
    let got = format!("{} {}", resp.status().as_u16(), resp.text().unwrap());
    assert_eq!(&got, want, "{req}");
}

#[test]
fn emulator_http_matches_golden() {
    let golden = golden_exchanges();
    let http = client();

    let bridge_port = free_port();
    let scenario = root().join("scenarios/galaxy.toml");
    let mut bridge = Proc::spawn(&[
        "sim-devices",
        "--scenario",
        scenario.to_str().unwrap(),
        "--bridge-port",
        &bridge_port.to_string(),
    ]);
    let first = bridge.line();
    assert!(first.starts_with("bridge on"), "{first}");
    let base = format!("http://127.0.0.1:{bridge_port}/api/xri/lights");
    expect_bytes(&golden, "GET /api/xri/lights/1", http.get(format!("{base}/1")).send().unwrap());
    let body = r#"{"on":true,"hue":46920,"sat":254,"bri":254}"#;
    expect_bytes(
        &golden,
        &format!("PUT /api/xri/lights/1/state {body}"),
        http.put(format!("{base}/1/state")).body(body).send().unwrap(),
    );
    expect_bytes(
        &golden,
        r#"PUT /api/xri/lights/2/state {"on":false}"#,
        http.put(format!("{base}/2/state")).body(r#"{"on":false}"#).send().unwrap(),
    );
    expect_bytes(&golden, "GET /api/xri/lights", http.get(&base).send().unwrap());
    expect_bytes(
        &golden,
        "GET /api/nobody/lights/1",
        http.get(format!("http://127.0.0.1:{bridge_port}/api/nobody/lights/1")).send().unwrap(),
    );

    // the lamp scenario's plug key differs from the golden one; only the
    // key-independent exchanges are compared
    let plug_port = free_port();
    let scenario = root().join("scenarios/lamp.toml");
    let mut plug = Proc::spawn(&[
        "sim-devices",
        "--scenario",
        scenario.to_str().unwrap(),
        "--plug-port",
        &plug_port.to_string(),
        "--callback",
        "http://127.0.0.1:1",
    ]);
    let first = plug.line();
    assert!(first.starts_with("plug plug-1 on"), "{first}");
    let base = format!("http://127.0.0.1:{plug_port}");
    expect_bytes(&golden, "GET /state", http.get(format!("{base}/state")).send().unwrap());
    expect_bytes(
        &golden,
        "POST /trigger/lamp_on/with/key/wrong",
        http.post(format!("{base}/trigger/lamp_on/with/key/wrong")).send().unwrap(),
    );
    let r = http.post(format!("{base}/trigger/lamp_on/with/key/xri-demo-key")).send().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.text().unwrap(), r#"{"event":"lamp_on","state":{"on":true,"last_event":"lamp_on"}}"#);
    let r = http.post(format!("{base}/press")).send().unwrap();
    assert_eq!(r.text().unwrap(), r#"{"on":false,"last_event":"button_press","press_seq":1}"#);

    assert_eq!(bridge.interrupt(), 0);
    assert_eq!(plug.interrupt(), 0);
}
