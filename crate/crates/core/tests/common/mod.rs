#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use ed25519_dalek::SigningKey;
use homegate_core::clock::ManualClock;
use homegate_core::config::Config;
use homegate_core::enrollment::{unwrap_device_key, ApprovalPayload};
use homegate_core::gateway::{Decision, Gateway};
use homegate_core::pki::{CertSigningRequest, Role};
use homegate_core::relay::{encode_envelope, IngestOutcome, Reading};
use homegate_core::segmentation::ZoneRole;

pub const TOKEN: &str = "test-operator-token-0001";
pub const T0: u64 = 1_700_000_000_000;

pub struct TestDevice {
    pub key: SigningKey,
    pub payload: ApprovalPayload,
    pub telemetry_key: [u8; 32],
    pub seq: u64,
}

impl TestDevice {
    pub fn envelope(&mut self, value: f64, ts: u64) -> Vec<u8> {
        self.seq += 1;
        let r = Reading::new("temp_c", value, ts);
        encode_envelope(&r, &self.telemetry_key, self.payload.device_id, self.seq, self.payload.epoch).unwrap()
    }
}

pub fn src() -> SocketAddr {
    "192.0.2.10:5683".parse().unwrap()
}

pub fn config(dir: &Path) -> Config {
    Config {
        data_dir: dir.to_path_buf(),
        operator_token: Some(TOKEN.into()),
        ..Config::default()
    }
}

pub fn memory_gateway() -> (Gateway, ManualClock) {
    let clock = ManualClock::new(T0);
    let mut gw = Gateway::in_memory(config(Path::new(".")), Arc::new(clock.clone()), [3; 32]).unwrap();
    gw.define_zone("sensors", "10.10.1.0/24".parse().unwrap(), ZoneRole::Iot, Some(TOKEN))
        .unwrap();
    (gw, clock)
}

pub fn enroll(gw: &mut Gateway, seed: u8, name: &str) -> TestDevice {
    let key = SigningKey::from_bytes(&[seed; 32]);
    let csr = CertSigningRequest::new(&key, name, Role::Device).unwrap();
    let rid = gw.submit_enrollment(csr, name, src()).unwrap();
    let payload = gw
        .decide_enrollment(&rid, Decision::Approve { zone: "sensors".into() }, Some(TOKEN))
        .unwrap()
        .unwrap();
    let telemetry_key = unwrap_device_key(&key, &payload.key_wrap, &payload.device_id, payload.epoch).unwrap();
    TestDevice {
        key,
        payload,
        telemetry_key,
        seq: 0,
    }
}

pub fn send(gw: &mut Gateway, dev: &mut TestDevice, value: f64, ts: u64) -> IngestOutcome {
    let env = dev.envelope(value, ts);
    gw.ingest(&env, src()).outcome
}
