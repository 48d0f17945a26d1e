use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ed25519_dalek::SigningKey;
use homegate_core::clock::ManualClock;
use homegate_core::config::Config;
use homegate_core::enrollment::{unwrap_device_key, EnrollMessage};
use homegate_core::gateway::Gateway;
use homegate_core::pki::{CertSigningRequest, Role};
use homegate_core::relay::{encode_envelope, Reading};
use homegate_server::{run_gateway_with_clock, RunOptions, RunningGateway, ServerError, MUTATING_ROUTES};
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::net::UdpSocket;

const TOKEN: &str = "server-test-token-0001";
const T0: u64 = 1_700_000_000_000;

struct Harness {
    _dir: TempDir,
    gw: Option<RunningGateway>,
    clock: ManualClock,
    client: Client,
    base: String,
}

impl Harness {
    async fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(T0);
        Gateway::init(dir.path(), Some([9; 32]), &clock).unwrap();
        let gw = run_gateway_with_clock(config(&dir), RunOptions::default(), Arc::new(clock.clone()))
            .await
            .unwrap();
        let base = format!("http://{}/api/v1", gw.http_addr);
        Harness {
            _dir: dir,
            gw: Some(gw),
            clock,
            client: Client::new(),
            base,
        }
    }

    fn udp_addr(&self) -> SocketAddr {
        self.gw.as_ref().unwrap().udp_addr
    }

    async fn call(&self, method: Method, path: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = self.client.request(method, format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, None, None).await
    }

    async fn audit_len(&self) -> u64 {
        let (_, v) = self.get("/audit/verify").await;
        assert_eq!(v["status"]["status"], "OK", "{v}");
        v["status"]["n"].as_u64().unwrap()
    }

    async fn sensors_zone(&self) {
        let (st, _) = self
            .call(
                Method::PUT,
                "/zones/sensors",
                Some(json!({"range": "10.10.1.0/24", "role": "IOT"})),
                Some(TOKEN),
            )
            .await;
        assert_eq!(st, StatusCode::CREATED);
    }

    async fn stop(mut self) {
        self.gw.take().unwrap().shutdown().await.unwrap();
    }
}

fn config(dir: &TempDir) -> Config {
    Config {
        data_dir: dir.path().to_path_buf(),
        udp_listen: "127.0.0.1:0".parse().unwrap(),
        http_listen: "127.0.0.1:0".parse().unwrap(),
        operator_token: Some(TOKEN.into()),
        ..Config::default()
    }
}

struct UdpDevice {
    sock: UdpSocket,
    key: SigningKey,
}

impl UdpDevice {
    async fn new(seed: u8) -> Self {
        UdpDevice {
            sock: UdpSocket::bind("127.0.0.1:0").await.unwrap(),
            key: SigningKey::from_bytes(&[seed; 32]),
        }
    }

    async fn recv(&self) -> EnrollMessage {
        let mut buf = vec![0u8; 4096];
        let (n, _) = tokio::time::timeout(Duration::from_secs(5), self.sock.recv_from(&mut buf))
            .await
            .expect("reply within 5 s")
            .unwrap();
        EnrollMessage::decode(&buf[..n]).unwrap()
    }

    /// Sends a request and returns the pending request id.
    async fn request(&self, to: SocketAddr, name: &str) -> String {
        let csr = CertSigningRequest::new(&self.key, name, Role::Device).unwrap();
        let msg = EnrollMessage::Request {
            requested_name: name.into(),
            csr,
        };
        self.sock.send_to(&msg.encode(), to).await.unwrap();
        match self.recv().await {
            EnrollMessage::Pending { request_id, .. } => request_id.to_string(),
            other => panic!("expected pending, got {other:?}"),
        }
    }
}

#[tokio::test]
async fn health_answers_quickly() {
    let started = Instant::now();
    let h = Harness::start().await;
    let (st, v) = h.get("/health").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok"}));
    assert!(started.elapsed() < Duration::from_secs(2));
    h.stop().await;
}

#[tokio::test]
async fn every_mutating_route_rejects_missing_or_wrong_token() {
    let h = Harness::start().await;
    let before = h.audit_len().await;
    for (method, template) in MUTATING_ROUTES {
        let path = template
            .trim_start_matches("/api/v1")
            .replace("{id}", "00")
            .replace("{name}", "lab");
        let method: Method = method.parse().unwrap();
        for token in [None, Some("wrong-token-wrong-token"), Some("")] {
            // A body that would otherwise be invalid must not change the answer.
            let (st, v) = h.call(method.clone(), &path, Some(json!({"junk": 1})), token).await;
            assert_eq!(st, StatusCode::UNAUTHORIZED, "{method} {path} token={token:?}");
            assert_eq!(v["code"], "unauthorized", "{method} {path}");
            assert!(v["message"].is_string());
        }
    }
    assert_eq!(h.audit_len().await, before, "rejected calls must not be audited");
    h.stop().await;
}

#[tokio::test]
async fn unknown_route_and_method_use_error_shape() {
    let h = Harness::start().await;
    let (st, v) = h.get("/nope").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
    let (st, v) = h.call(Method::DELETE, "/health", None, None).await;
    assert_eq!(st, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(v["code"], "method_not_allowed");
    h.stop().await;
}

#[tokio::test]
async fn enrollment_over_udp_then_telemetry_query() {
    let h = Harness::start().await;
    h.sensors_zone().await;
    let dev = UdpDevice::new(21).await;
    let rid = h.request(&dev, "kitchen").await;

    let (st, v) = h.get("/enrollments?state=pending").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);

    let audit0 = h.audit_len().await;
    let approve = format!("/enrollments/{rid}/approve");
    let (st, v) = h
        .call(Method::POST, &approve, Some(json!({"zone": "sensors"})), Some(TOKEN))
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["state"], "APPROVED");
    assert_eq!(h.audit_len().await, audit0 + 1);

    let (st, v) = h
        .call(Method::POST, &approve, Some(json!({"zone": "sensors"})), Some(TOKEN))
        .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["code"], "not_pending");
    assert_eq!(h.audit_len().await, audit0 + 1);

    // The approval is pushed back to the requesting socket.
    let payload = match dev.recv().await {
        EnrollMessage::Approved(p) => p,
        other => panic!("expected approval, got {other:?}"),
    };
    let key = unwrap_device_key(&dev.key, &payload.key_wrap, &payload.device_id, payload.epoch).unwrap();

    // 150 readings over 5 minutes, 2 s apart in virtual time so the flood
    // rule stays quiet.
    let mut sent = Vec::new();
    for i in 0..150u64 {
        let ts = T0 + i * 2000;
        h.clock.set_ms(ts);
        tokio::time::sleep(Duration::from_millis(1)).await;
        let value = 18.0 + (i % 7) as f64 * 0.5;
        let env = encode_envelope(&Reading::new("temp_c", value, ts), &key, payload.device_id, i + 1, payload.epoch)
            .unwrap();
        dev.sock.send_to(&env, h.udp_addr()).await.unwrap();
        sent.push((ts, value));
    }
    let path = format!("/telemetry/{}?bucket=60&agg=mean", payload.device_id);
    let deadline = Instant::now() + Duration::from_secs(5);
    let v = loop {
        let (st, v) = h.get(&path).await;
        assert_eq!(st, StatusCode::OK, "{v}");
        let stored: f64 = v["points"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["count"].as_f64().unwrap())
            .sum();
        if stored as usize == sent.len() || Instant::now() > deadline {
            break v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    };

    let mut oracle: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    for (ts, value) in &sent {
        let e = oracle.entry(ts / 60_000 * 60_000).or_default();
        e.0 += value;
        e.1 += 1;
    }
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), oracle.len());
    for (p, (start, (sum, n))) in points.iter().zip(&oracle) {
        assert_eq!(p["ts"].as_u64().unwrap(), *start);
        assert_eq!(p["count"].as_u64().unwrap(), *n);
        assert!((p["value"].as_f64().unwrap() - sum / *n as f64).abs() < 1e-9);
    }
    h.stop().await;
}

impl Harness {
    async fn request(&self, dev: &UdpDevice, name: &str) -> String {
        dev.request(self.udp_addr(), name).await
    }

    async fn enrolled_device(&self, seed: u8, name: &str) -> String {
        let dev = UdpDevice::new(seed).await;
        let rid = self.request(&dev, name).await;
        let (st, v) = self
            .call(
                Method::POST,
                &format!("/enrollments/{rid}/approve"),
                Some(json!({"zone": "sensors"})),
                Some(TOKEN),
            )
            .await;
        assert_eq!(st, StatusCode::OK, "{v}");
        v["device"]["device_id"].as_str().unwrap().to_owned()
    }
}

#[tokio::test]
async fn each_successful_mutation_appends_one_audit_record() {
    let h = Harness::start().await;
    h.sensors_zone().await;
    let dev = h.enrolled_device(31, "porch").await;
    let other = UdpDevice::new(32).await;
    let denied = h.request(&other, "shed").await;

    let recipient = base64_key([4; 32]);
    let steps: Vec<(Method, String, Option<Value>)> = vec![
        (Method::PUT, "/zones/cameras".into(), Some(json!({"range": "10.10.2.0/24", "role": "IOT"}))),
        (
            Method::POST,
            "/zones/sensors/grants".into(),
            Some(json!({"zone": "cameras", "port": 554, "proto": "TCP"})),
        ),
        (Method::POST, format!("/enrollments/{denied}/deny"), Some(json!({"reason": "unknown"}))),
        (Method::POST, format!("/devices/{dev}/quarantine"), None),
        (Method::POST, format!("/devices/{dev}/release"), None),
        (Method::POST, format!("/devices/{dev}/revoke"), Some(json!({"reason": "lost"}))),
        (
            Method::POST,
            "/export".into(),
            Some(json!({"from": 0, "to": u64::MAX, "recipient_pub": recipient})),
        ),
    ];
    for (method, path, body) in steps {
        let before = h.audit_len().await;
        let (st, v) = h.call(method.clone(), &path, body, Some(TOKEN)).await;
        assert!(st.is_success(), "{method} {path}: {st} {v}");
        assert_eq!(h.audit_len().await, before + 1, "{method} {path}");
    }

    let (st, v) = h.get(&format!("/devices/{dev}")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "REVOKED");
    let (_, rules) = h.get("/policy/rules").await;
    assert!(rules.as_str().unwrap().contains("554"), "{rules}");
    h.stop().await;
}

fn base64_key(k: [u8; 32]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(k)
}

#[tokio::test]
async fn validation_errors_are_422() {
    let h = Harness::start().await;
    let (st, v) = h
        .call(Method::PUT, "/zones/lab", Some(json!({"range": "10.0.0.0/33", "role": "IOT"})), Some(TOKEN))
        .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (st, v) = h
        .call(
            Method::POST,
            "/export",
            Some(json!({"from": 0, "to": 1, "recipient_pub": "short"})),
            Some(TOKEN),
        )
        .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "bad_recipient");
    let (st, _) = h.get("/enrollments?state=bogus").await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    h.stop().await;
}

#[tokio::test]
async fn event_stream_delivers_enrollment_events() {
    let h = Harness::start().await;
    h.sensors_zone().await;
    let mut resp = h.client.get(format!("{}/events", h.base)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let dev = UdpDevice::new(41).await;
    h.request(&dev, "attic").await;
    let mut seen = String::new();
    let deadline = Instant::now() + Duration::from_secs(5);
    while !seen.contains("event: enrollment") && Instant::now() < deadline {
        match tokio::time::timeout(Duration::from_secs(1), resp.chunk()).await {
            Ok(Ok(Some(bytes))) => seen.push_str(&String::from_utf8_lossy(&bytes)),
            _ => continue,
        }
    }
    assert!(seen.contains("event: enrollment"), "{seen}");
    assert!(seen.contains("attic"), "{seen}");
    drop(resp);
    h.stop().await;
}

#[tokio::test]
async fn uninitialized_data_dir_refuses_to_start() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_gateway_with_clock(config(&dir), RunOptions::default(), Arc::new(ManualClock::new(T0))).await;
    assert!(matches!(res, Err(ServerError::UninitializedDataDir(_))));
}

#[tokio::test]
async fn missing_token_refuses_to_start() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T0);
    Gateway::init(dir.path(), Some([1; 32]), &clock).unwrap();
    let cfg = Config {
        operator_token: None,
        ..config(&dir)
    };
    let res = run_gateway_with_clock(cfg, RunOptions::default(), Arc::new(clock)).await;
    assert!(matches!(res, Err(ServerError::MissingToken)));
}

#[tokio::test]
async fn busy_port_is_reported() {
    let h = Harness::start().await;
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T0);
    Gateway::init(dir.path(), Some([2; 32]), &clock).unwrap();
    let busy = h.udp_addr();
    let cfg = Config {
        udp_listen: busy,
        ..config(&dir)
    };
    match run_gateway_with_clock(cfg, RunOptions::default(), Arc::new(clock)).await {
        Err(ServerError::PortInUse(addr)) => assert_eq!(addr, busy),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second bind on {busy} succeeded"),
    }
    h.stop().await;
}
