//! Deterministic virtual fleet driving the real gateway code.
//!
//! Everything runs on one thread against a [`ManualClock`]. Events are
//! ordered by `(virtual time, insertion order)`, and every random choice
//! comes from generators seeded by [`FleetSpec::seed`], so identical inputs
//! give byte-identical [`ScenarioReport`]s.
//!
//! Topology: `sensor-*` devices talk to the gateway directly, `annex-*`
//! devices reach it through one keyless repeater, which itself enrolls with
//! a REPEATER certificate.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::SigningKey;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Clock, ManualClock};
use crate::config::Config;
use crate::enrollment::{unwrap_device_key, DeviceStatus, EnrollMessage, EnrollmentState};
use crate::gateway::{DatagramOutcome, Decision, Gateway, GatewayError};
use crate::ids::{AlertRule, LoginTarget, TargetUnreachable};
use crate::pki::{CertSigningRequest, Role};
use crate::relay::{
    encode_envelope, repeater_forward, ForwardDecision, IngestOutcome, Reading, RepeaterState,
    DEFAULT_UDP_PORT,
};
use crate::segmentation::{AddrBlock, ZoneRole};
use crate::DeviceId;

/// Virtual epoch the simulation clock starts at (2023-11-14T22:13:20Z).
pub const SIM_START_MS: u64 = 1_700_000_000_000;
pub const SIM_OPERATOR_TOKEN: &str = "simulated-operator-token";
pub const METRIC: &str = "temp_c";
pub const ENROLL_RETRY_MS: u64 = 5_000;
pub const ENROLL_RETRIES: u32 = 3;
const OPERATOR_PERIOD_MS: u64 = 500;
const TICK_PERIOD_MS: u64 = 1_000;
/// Time after the last scheduled send during which in-flight datagrams and
/// end-of-run attacks still land.
const DRAIN_MS: u64 = 5_000;

pub const SENSOR_ZONE: &str = "sensors";
pub const ANNEX_ZONE: &str = "annex";
pub const RELAY_ZONE: &str = "relay";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid fleet spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub max_delay_ms: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            dup_prob: 0.0,
            max_delay_ms: 50,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.loss_prob) || !ok(self.dup_prob) {
            return Err(SimError::InvalidSpec("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Applies one link's loss, duplication and delay to a datagram. Returns
/// each copy that arrives with its delay in ms.
pub fn virtual_link_deliver(
    datagram: &[u8],
    link: &LinkModel,
    rng: &mut impl Rng,
) -> Vec<(Vec<u8>, u64)> {
    if rng.gen_bool(link.loss_prob) {
        return Vec::new();
    }
    let copies = if rng.gen_bool(link.dup_prob) { 2 } else { 1 };
    (0..copies)
        .map(|_| (datagram.to_vec(), rng.gen_range(0..=link.max_delay_ms)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub n_direct: usize,
    pub n_via_repeater: usize,
    pub send_interval_ms: u64,
    pub duration_s: u64,
    pub seed: u64,
    /// Device to gateway.
    pub direct_link: LinkModel,
    /// Device to repeater and repeater to gateway.
    pub repeater_link: LinkModel,
    pub flood_rate: u32,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            n_direct: 2,
            n_via_repeater: 0,
            send_interval_ms: 1_000,
            duration_s: 60,
            seed: 0,
            direct_link: LinkModel::default(),
            repeater_link: LinkModel::default(),
            flood_rate: 10,
        }
    }
}

impl FleetSpec {
    pub fn new(n_direct: usize, n_via_repeater: usize, duration_s: u64, seed: u64) -> Self {
        Self {
            n_direct,
            n_via_repeater,
            duration_s,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.direct_link.validate()?;
        self.repeater_link.validate()?;
        if self.send_interval_ms == 0 {
            return Err(SimError::InvalidSpec("send interval must be positive".into()));
        }
        if self.flood_rate == 0 {
            return Err(SimError::InvalidSpec("flood rate must be positive".into()));
        }
        if self.n_direct > 60_000 || self.n_via_repeater > 60_000 {
            return Err(SimError::InvalidSpec("at most 60000 devices per zone".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Scenario {
    Baseline,
    /// An attacker re-sends `n` envelopes captured from the first device.
    ReplayAttack { n: usize },
    /// An unenrolled sender with a random key emits `n` envelopes.
    RogueDevice { n: usize },
    /// The first device sends at twice the flood rate.
    Flood,
    /// Repeater links duplicate 10% of datagrams.
    DupRepeater,
    /// The first device is quarantined and released mid-run but keeps
    /// sending under its old key.
    StaleKey,
}

impl Scenario {
    pub const NAMES: [&'static str; 6] = [
        "baseline",
        "replay_attack",
        "rogue_device",
        "flood",
        "dup_repeater",
        "stale_key",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::ReplayAttack { .. } => "replay_attack",
            Scenario::RogueDevice { .. } => "rogue_device",
            Scenario::Flood => "flood",
            Scenario::DupRepeater => "dup_repeater",
            Scenario::StaleKey => "stale_key",
        }
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "baseline" => Scenario::Baseline,
            "replay_attack" => Scenario::ReplayAttack { n: 50 },
            "rogue_device" => Scenario::RogueDevice { n: 20 },
            "flood" => Scenario::Flood,
            "dup_repeater" => Scenario::DupRepeater,
            "stale_key" => Scenario::StaleKey,
            other => return Err(SimError::UnknownScenario(other.to_owned())),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeaterCounters {
    pub forwarded: u64,
    pub dropped_dup: u64,
    pub dropped_hops: u64,
    pub dropped_malformed: u64,
}

/// Outcome of one run. Contains no wall-clock data, so two runs with the
/// same inputs serialize identically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub n_direct: usize,
    pub n_via_repeater: usize,
    pub duration_s: u64,
    /// Telemetry envelopes emitted by fleet devices.
    pub sent: u64,
    /// Envelopes emitted by attackers.
    pub injected: u64,
    /// Telemetry datagrams that reached the ingest pipeline.
    pub delivered: u64,
    pub stored: u64,
    pub rejected: BTreeMap<String, u64>,
    pub alerts: BTreeMap<String, u64>,
    /// Stored rows whose `(device, seq)` was never sent by the fleet.
    pub stored_not_sent: u64,
    /// Fleet sends with no stored row.
    pub sent_not_stored: u64,
    /// Stored outcomes beyond the number of distinct stored rows.
    pub duplicate_stores: u64,
    pub enrolled: u64,
    pub enrollment_timeouts: u64,
    pub device_status: BTreeMap<String, String>,
    pub repeater: RepeaterCounters,
    pub virtual_ms: u64,
}

impl ScenarioReport {
    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    pub fn rejected(&self, outcome: IngestOutcome) -> u64 {
        self.rejected.get(&outcome_key(outcome)).copied().unwrap_or(0)
    }

    pub fn alerts_for(&self, rule: AlertRule) -> u64 {
        self.alerts.get(&rule_key(rule)).copied().unwrap_or(0)
    }

    /// `delivered = stored + Σ rejected`.
    pub fn conserves(&self) -> bool {
        self.delivered == self.stored + self.rejected_total()
    }
}

fn outcome_key(o: IngestOutcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn rule_key(r: AlertRule) -> String {
    serde_json::to_value(r)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

const REJECT_OUTCOMES: [IngestOutcome; 7] = [
    IngestOutcome::RejectedReplay,
    IngestOutcome::RejectedUnknown,
    IngestOutcome::RejectedAuth,
    IngestOutcome::RejectedQuarantined,
    IngestOutcome::RejectedRevoked,
    IngestOutcome::RejectedMalformed,
    IngestOutcome::FailedStorage,
];

const RULES: [AlertRule; 5] = [
    AlertRule::R1Unknown,
    AlertRule::R2Replay,
    AlertRule::R3Auth,
    AlertRule::R4Flood,
    AlertRule::R5Silent,
];

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {} (seed {}, {} direct + {} via repeater, {} s virtual)",
            self.scenario, self.seed, self.n_direct, self.n_via_repeater, self.duration_s
        )?;
        let row = |f: &mut fmt::Formatter<'_>, k: &str, v: u64| writeln!(f, "  {k:<24}{v:>10}");
        row(f, "sent", self.sent)?;
        row(f, "injected", self.injected)?;
        row(f, "delivered", self.delivered)?;
        row(f, "stored", self.stored)?;
        for (k, v) in &self.rejected {
            row(f, k, *v)?;
        }
        for (k, v) in &self.alerts {
            row(f, &format!("alerts {k}"), *v)?;
        }
        row(f, "stored_not_sent", self.stored_not_sent)?;
        row(f, "sent_not_stored", self.sent_not_stored)?;
        row(f, "duplicate_stores", self.duplicate_stores)?;
        row(f, "enrolled", self.enrolled)?;
        row(f, "enrollment_timeouts", self.enrollment_timeouts)?;
        row(f, "repeater forwarded", self.repeater.forwarded)?;
        row(f, "repeater dropped_dup", self.repeater.dropped_dup)?;
        row(f, "repeater dropped_hops", self.repeater.dropped_hops)?;
        row(f, "virtual_ms", self.virtual_ms)?;
        writeln!(f, "  devices")?;
        for (name, status) in &self.device_status {
            writeln!(f, "    {name:<22}{status}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DevState {
    Enrolling,
    Active,
    TimedOut,
    Rejected,
}

#[derive(Debug)]
struct SimDevice {
    name: String,
    zone: &'static str,
    role: Role,
    via_repeater: bool,
    key: SigningKey,
    addr: SocketAddr,
    state: DevState,
    /// Invalidates wake-ups scheduled before the last state change.
    generation: u64,
    attempts: u32,
    device_id: Option<DeviceId>,
    telemetry_key: [u8; 32],
    epoch: u32,
    seq: u64,
    value: f64,
    interval_ms: u64,
    sends: bool,
}

#[derive(Debug)]
enum Event {
    Wake { idx: usize, generation: u64 },
    ToGateway { src: SocketAddr, origin: Option<usize>, data: Vec<u8> },
    ToRepeater { origin: usize, data: Vec<u8> },
    ToDevice { idx: usize, data: Vec<u8> },
    Operator,
    Tick,
    Replay,
    Rogue { i: usize },
    StaleKeyCycle,
}

struct Scheduled {
    at: u64,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

/// A finished run: the report plus the gateway it ran against, for tests
/// that need to inspect end state.
pub struct SimOutcome {
    pub report: ScenarioReport,
    pub gateway: Gateway,
    pub clock: ManualClock,
    devices: Vec<(String, Option<DeviceId>)>,
}

impl SimOutcome {
    pub fn device_id(&self, name: &str) -> Option<DeviceId> {
        self.devices
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| *id)
    }
}

fn sim_addr(net: u8, i: usize) -> SocketAddr {
    let i = i as u32;
    let ip = Ipv4Addr::new(198, 18 + net, (i >> 8) as u8, (i & 0xff) as u8);
    SocketAddr::V4(SocketAddrV4::new(ip, DEFAULT_UDP_PORT))
}

struct Sim {
    spec: FleetSpec,
    scenario: Scenario,
    clock: ManualClock,
    gw: Gateway,
    queue: BinaryHeap<Scheduled>,
    order: u64,
    devices: Vec<SimDevice>,
    by_key: HashMap<[u8; 32], usize>,
    repeater: RepeaterState,
    repeater_idx: Option<usize>,
    link_rng: ChaCha20Rng,
    value_rng: ChaCha20Rng,
    attack_rng: ChaCha20Rng,
    end_ms: u64,
    sent: HashSet<(DeviceId, u64)>,
    captured: Vec<Vec<u8>>,
    report: ScenarioReport,
    stored_events: u64,
}

fn derive_seed(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"homegate-sim");
    h.update(label.as_bytes());
    h.update(seed.to_be_bytes());
    h.finalize().into()
}

impl Sim {
    fn new(spec: FleetSpec, scenario: Scenario) -> Result<Self, SimError> {
        spec.validate()?;
        let mut spec = spec;
        if scenario == Scenario::DupRepeater {
            spec.repeater_link.dup_prob = 0.1;
        }
        let clock = ManualClock::new(SIM_START_MS);
        let config = Config {
            operator_token: Some(SIM_OPERATOR_TOKEN.into()),
            flood_rate: spec.flood_rate,
            single_thread: true,
            ..Config::default()
        };
        let mut gw = Gateway::in_memory(
            config,
            Arc::new(clock.clone()),
            derive_seed(spec.seed, "gateway"),
        )?;
        let token = Some(SIM_OPERATOR_TOKEN);
        let zone = |s: &str| AddrBlock::from_str(s).expect("literal block");
        gw.define_zone(SENSOR_ZONE, zone("10.11.0.0/16"), ZoneRole::Iot, token)?;
        gw.define_zone(ANNEX_ZONE, zone("10.12.0.0/16"), ZoneRole::Iot, token)?;
        gw.define_zone(RELAY_ZONE, zone("10.13.0.0/29"), ZoneRole::Repeater, token)?;

        let mut key_rng = ChaCha20Rng::from_seed(derive_seed(spec.seed, "device-keys"));
        let mut devices = Vec::new();
        let mut new_device = |name: String, zone, role, via_repeater, addr, sends| {
            let mut k = [0u8; 32];
            key_rng.fill_bytes(&mut k);
            SimDevice {
                name,
                zone,
                role,
                via_repeater,
                key: SigningKey::from_bytes(&k),
                addr,
                state: DevState::Enrolling,
                generation: 0,
                attempts: 0,
                device_id: None,
                telemetry_key: [0; 32],
                epoch: 0,
                seq: 0,
                value: 20.0,
                interval_ms: spec.send_interval_ms,
                sends,
            }
        };
        for i in 0..spec.n_direct {
            devices.push(new_device(format!("sensor-{i:03}"), SENSOR_ZONE, Role::Device, false, sim_addr(0, i + 2), true));
        }
        for i in 0..spec.n_via_repeater {
            devices.push(new_device(format!("annex-{i:03}"), ANNEX_ZONE, Role::Device, true, sim_addr(1, i + 2), true));
        }
        let repeater_idx = (spec.n_via_repeater > 0).then(|| {
            devices.push(new_device("repeater".into(), RELAY_ZONE, Role::Repeater, false, sim_addr(2, 1), false));
            devices.len() - 1
        });
        if scenario == Scenario::Flood {
            if let Some(d) = devices.first_mut() {
                d.interval_ms = (1000 / (u64::from(spec.flood_rate) * 2)).max(1);
            }
        }
        let by_key = devices
            .iter()
            .enumerate()
            .map(|(i, d)| (d.key.verifying_key().to_bytes(), i))
            .collect();
        let end_ms = spec.duration_s * 1000;
        let report = ScenarioReport {
            scenario: scenario.name().into(),
            seed: spec.seed,
            n_direct: spec.n_direct,
            n_via_repeater: spec.n_via_repeater,
            duration_s: spec.duration_s,
            rejected: REJECT_OUTCOMES.iter().map(|&o| (outcome_key(o), 0)).collect(),
            alerts: RULES.iter().map(|&r| (rule_key(r), 0)).collect(),
            ..Default::default()
        };
        Ok(Sim {
            link_rng: ChaCha20Rng::from_seed(derive_seed(spec.seed, "links")),
            value_rng: ChaCha20Rng::from_seed(derive_seed(spec.seed, "values")),
            attack_rng: ChaCha20Rng::from_seed(derive_seed(spec.seed, "attacker")),
            spec,
            scenario,
            clock,
            gw,
            queue: BinaryHeap::new(),
            order: 0,
            devices,
            by_key,
            repeater: RepeaterState::default(),
            repeater_idx,
            end_ms,
            sent: HashSet::new(),
            captured: Vec::new(),
            report,
            stored_events: 0,
        })
    }

    fn now(&self) -> u64 {
        self.clock.now_ms() - SIM_START_MS
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.order += 1;
        self.queue.push(Scheduled {
            at,
            order: self.order,
            event,
        });
    }

    fn send_over(&mut self, link: LinkModel, data: &[u8], mk: impl Fn(Vec<u8>) -> Event) {
        let now = self.now();
        for (copy, delay) in virtual_link_deliver(data, &link, &mut self.link_rng) {
            self.schedule(now + delay, mk(copy));
        }
    }

    /// Device-originated datagram, routed directly or via the repeater.
    fn device_send(&mut self, idx: usize, data: Vec<u8>) {
        let d = &self.devices[idx];
        if d.via_repeater {
            let link = self.spec.repeater_link;
            self.send_over(link, &data, |data| Event::ToRepeater { origin: idx, data });
        } else {
            let (link, src) = (self.spec.direct_link, d.addr);
            self.send_over(link, &data, |data| Event::ToGateway {
                src,
                origin: Some(idx),
                data,
            });
        }
    }

    fn reply_to(&mut self, idx: usize, data: Vec<u8>) {
        let link = if self.devices[idx].via_repeater {
            self.spec.repeater_link
        } else {
            self.spec.direct_link
        };
        self.send_over(link, &data, |data| Event::ToDevice { idx, data });
    }

    fn run(mut self) -> Result<SimOutcome, SimError> {
        // Stagger first contact so devices don't all enroll in one instant.
        for idx in 0..self.devices.len() {
            let at = (idx as u64 * 7) % 1000;
            self.schedule(at, Event::Wake { idx, generation: 0 });
        }
        self.schedule(OPERATOR_PERIOD_MS, Event::Operator);
        self.schedule(TICK_PERIOD_MS, Event::Tick);
        match self.scenario {
            Scenario::ReplayAttack { .. } => self.schedule(self.end_ms + 1_000, Event::Replay),
            Scenario::RogueDevice { n } => {
                for i in 0..n {
                    self.schedule(2_000 + i as u64 * 1_000, Event::Rogue { i });
                }
            }
            Scenario::StaleKey => self.schedule(self.end_ms / 2, Event::StaleKeyCycle),
            _ => {}
        }

        while let Some(Scheduled { at, event, .. }) = self.queue.pop() {
            self.clock.set_ms(SIM_START_MS + at);
            self.dispatch(event)?;
        }
        self.finish()
    }

    fn dispatch(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Wake { idx, generation } => self.wake(idx, generation),
            Event::ToRepeater { origin, data } => {
                let now = self.clock.now_ms();
                if let ForwardDecision::Forward(out) = repeater_forward(&data, &mut self.repeater, now) {
                    let src = self
                        .repeater_idx
                        .map_or(sim_addr(2, 1), |i| self.devices[i].addr);
                    let link = self.spec.repeater_link;
                    self.send_over(link, &out, |data| Event::ToGateway {
                        src,
                        origin: Some(origin),
                        data,
                    });
                }
            }
            Event::ToGateway { src, origin, data } => match self.gw.handle_datagram(&data, src) {
                DatagramOutcome::Telemetry(res) => {
                    self.report.delivered += 1;
                    if res.outcome == IngestOutcome::Stored {
                        self.stored_events += 1;
                    } else {
                        *self.report.rejected.entry(outcome_key(res.outcome)).or_default() += 1;
                    }
                }
                DatagramOutcome::Enrollment { reply: Some(reply) } => {
                    if let Some(idx) = origin {
                        self.reply_to(idx, reply);
                    }
                }
                _ => {}
            },
            Event::ToDevice { idx, data } => self.device_receive(idx, &data),
            Event::Operator => {
                self.operate()?;
                if self.now() + OPERATOR_PERIOD_MS < self.end_ms {
                    self.schedule(self.now() + OPERATOR_PERIOD_MS, Event::Operator);
                }
            }
            Event::Tick => {
                self.gw.tick();
                if self.now() + TICK_PERIOD_MS <= self.end_ms + DRAIN_MS {
                    self.schedule(self.now() + TICK_PERIOD_MS, Event::Tick);
                }
            }
            Event::Replay => {
                let now = self.now();
                let src = sim_addr(3, 66);
                for data in std::mem::take(&mut self.captured) {
                    self.report.injected += 1;
                    self.schedule(now, Event::ToGateway { src, origin: None, data });
                }
            }
            Event::Rogue { i } => {
                let mut id = [0u8; 8];
                let mut key = [0u8; 32];
                self.attack_rng.fill_bytes(&mut id);
                self.attack_rng.fill_bytes(&mut key);
                id[0] |= 0x80;
                let reading = Reading::new(METRIC, 99.0, self.clock.now_ms());
                let data = encode_envelope(&reading, &key, DeviceId(id), i as u64 + 1, 0)
                    .expect("valid reading");
                self.report.injected += 1;
                let src = sim_addr(3, 13);
                self.schedule(self.now(), Event::ToGateway { src, origin: None, data });
            }
            Event::StaleKeyCycle => {
                if let Some(id) = self.devices.first().and_then(|d| d.device_id) {
                    let token = Some(SIM_OPERATOR_TOKEN);
                    self.gw.quarantine(&id, token)?;
                    self.gw.release(&id, token)?;
                }
            }
        }
        Ok(())
    }

    fn wake(&mut self, idx: usize, generation: u64) {
        let now = self.now();
        let d = &mut self.devices[idx];
        if d.generation != generation {
            return;
        }
        match d.state {
            DevState::Enrolling => {
                if d.attempts > ENROLL_RETRIES {
                    d.state = DevState::TimedOut;
                    return;
                }
                d.attempts += 1;
                let csr = CertSigningRequest::new(&d.key, &d.name, d.role).expect("short subject");
                let msg = EnrollMessage::Request {
                    requested_name: d.name.clone(),
                    csr,
                }
                .encode();
                let generation = d.generation;
                self.device_send(idx, msg);
                self.schedule(now + ENROLL_RETRY_MS, Event::Wake { idx, generation });
            }
            DevState::Active => {
                if !d.sends || now >= self.end_ms {
                    return;
                }
                let id = d.device_id.expect("active devices have ids");
                d.seq += 1;
                let step: f64 = self.value_rng.gen_range(-0.5..=0.5);
                d.value = (d.value + step).clamp(-40.0, 85.0);
                let reading = Reading::new(METRIC, d.value, self.clock.now_ms());
                let data = encode_envelope(&reading, &d.telemetry_key, id, d.seq, d.epoch)
                    .expect("valid reading");
                let (seq, interval, generation) = (d.seq, d.interval_ms, d.generation);
                self.report.sent += 1;
                self.sent.insert((id, seq));
                if let Scenario::ReplayAttack { n } = self.scenario {
                    if idx == 0 && self.captured.len() < n {
                        self.captured.push(data.clone());
                    }
                }
                self.device_send(idx, data);
                self.schedule(now + interval, Event::Wake { idx, generation });
            }
            DevState::TimedOut | DevState::Rejected => {}
        }
    }

    fn device_receive(&mut self, idx: usize, data: &[u8]) {
        let now = self.now();
        let d = &mut self.devices[idx];
        if d.state != DevState::Enrolling {
            return;
        }
        match EnrollMessage::decode(data) {
            Ok(EnrollMessage::Approved(p)) => {
                if p.certificate.public_key != d.key.verifying_key().to_bytes() {
                    return;
                }
                let Ok(key) = unwrap_device_key(&d.key, &p.key_wrap, &p.device_id, p.epoch) else {
                    return;
                };
                d.device_id = Some(p.device_id);
                d.telemetry_key = key;
                d.epoch = p.epoch;
                d.state = DevState::Active;
                d.generation += 1;
                let (generation, interval) = (d.generation, d.interval_ms);
                self.report.enrolled += 1;
                self.schedule(now + interval, Event::Wake { idx, generation });
            }
            Ok(EnrollMessage::Rejected { .. }) => {
                d.state = DevState::Rejected;
                d.generation += 1;
            }
            _ => {}
        }
    }

    /// The scripted operator approves every pending request into the zone
    /// its sender belongs to and hands the approval to the device.
    fn operate(&mut self) -> Result<(), SimError> {
        let pending: Vec<_> = self
            .gw
            .enrollments()
            .list(Some(EnrollmentState::Pending))
            .iter()
            .map(|r| (r.request_id, r.csr.public_key))
            .collect();
        for (rid, pk) in pending {
            let Some(&idx) = self.by_key.get(&pk) else {
                continue;
            };
            let zone = self.devices[idx].zone.to_owned();
            let decision = Decision::Approve { zone };
            if let Some(payload) =
                self.gw
                    .decide_enrollment(&rid, decision, Some(SIM_OPERATOR_TOKEN))?
            {
                self.reply_to(idx, EnrollMessage::Approved(payload).encode());
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutcome, SimError> {
        let rows = self.gw.readings().rows_all(0, u64::MAX);
        let stored_set: HashSet<(DeviceId, u64)> = rows.iter().map(|r| (r.device_id, r.seq)).collect();
        self.report.stored = self.stored_events;
        self.report.duplicate_stores = self.stored_events - stored_set.len() as u64;
        self.report.stored_not_sent = stored_set.difference(&self.sent).count() as u64;
        self.report.sent_not_stored = self.sent.difference(&stored_set).count() as u64;
        for a in self.gw.alerts() {
            *self.report.alerts.entry(rule_key(a.rule)).or_default() += 1;
        }
        for d in &self.devices {
            let status = match (d.state, d.device_id.and_then(|id| self.gw.device(&id))) {
                (_, Some(rec)) => match rec.status {
                    DeviceStatus::Active => "ACTIVE",
                    DeviceStatus::Quarantined => "QUARANTINED",
                    DeviceStatus::Revoked => "REVOKED",
                },
                (DevState::TimedOut, None) => "ENROLLMENT_TIMEOUT",
                (DevState::Rejected, None) => "REJECTED",
                _ => "ENROLLING",
            };
            if d.state == DevState::TimedOut {
                self.report.enrollment_timeouts += 1;
            }
            self.report.device_status.insert(d.name.clone(), status.into());
        }
        self.report.repeater = RepeaterCounters {
            forwarded: self.repeater.forwarded_count,
            dropped_dup: self.repeater.dropped_dup_count,
            dropped_hops: self.repeater.dropped_hops_count,
            dropped_malformed: self.repeater.dropped_malformed_count,
        };
        self.report.virtual_ms = self.now();
        let devices = self
            .devices
            .iter()
            .map(|d| (d.name.clone(), d.device_id))
            .collect();
        Ok(SimOutcome {
            report: self.report,
            gateway: self.gw,
            clock: self.clock,
            devices,
        })
    }
}

/// Runs a scenario and keeps the gateway for inspection.
pub fn run_scenario_full(spec: &FleetSpec, scenario: Scenario) -> Result<SimOutcome, SimError> {
    Sim::new(spec.clone(), scenario)?.run()
}

pub fn run_scenario(spec: &FleetSpec, scenario: Scenario) -> Result<ScenarioReport, SimError> {
    Ok(run_scenario_full(spec, scenario)?.report)
}

/// A simulated device's login surface. Only a SHA-256 of the password is
/// held.
#[derive(Debug, Clone)]
pub struct MockLoginEndpoint {
    pub id: String,
    pub service: String,
    pub username: String,
    password_hash: [u8; 32],
    pub reachable: bool,
}

impl MockLoginEndpoint {
    pub fn new(id: &str, service: &str, username: &str, password: &str) -> Self {
        Self {
            id: id.to_owned(),
            service: service.to_owned(),
            username: username.to_owned(),
            password_hash: Sha256::digest(password.as_bytes()).into(),
            reachable: true,
        }
    }
}

impl LoginTarget for MockLoginEndpoint {
    fn target_id(&self) -> String {
        self.id.clone()
    }

    fn service(&self) -> &str {
        &self.service
    }

    fn try_login(&mut self, username: &str, password: &str) -> Result<bool, TargetUnreachable> {
        if !self.reachable {
            return Err(TargetUnreachable);
        }
        let h: [u8; 32] = Sha256::digest(password.as_bytes()).into();
        Ok(username == self.username && h == self.password_hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedCredential {
    pub device: usize,
    pub service: String,
    pub username: String,
    pub password: String,
}

impl FromStr for PlantedCredential {
    type Err = String;

    /// `INDEX:SERVICE:USERNAME:PASSWORD`; the password may contain colons.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.splitn(4, ':');
        let (Some(i), Some(service), Some(username), Some(password)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err("expected INDEX:SERVICE:USERNAME:PASSWORD".into());
        };
        Ok(PlantedCredential {
            device: i.parse().map_err(|_| format!("bad device index `{i}`"))?,
            service: service.to_owned(),
            username: username.to_owned(),
            password: password.to_owned(),
        })
    }
}

/// One login endpoint per simulated device. Devices get rotated random
/// passwords unless a planted credential replaces theirs.
pub fn fleet_login_endpoints(
    n: usize,
    seed: u64,
    planted: &[PlantedCredential],
) -> Vec<MockLoginEndpoint> {
    const SERVICES: [&str; 4] = ["ssh", "telnet", "http", "rtsp"];
    let mut rng = ChaCha20Rng::from_seed(derive_seed(seed, "credentials"));
    (0..n)
        .map(|i| {
            let mut pw = [0u8; 12];
            rng.fill_bytes(&mut pw);
            let id = format!("sensor-{i:03}");
            match planted.iter().find(|p| p.device == i) {
                Some(p) => MockLoginEndpoint::new(&id, &p.service, &p.username, &p.password),
                None => MockLoginEndpoint::new(&id, SERVICES[i % 4], "admin", &hex::encode(pw)),
            }
        })
        .collect()
}
