//! The composition root. One [`Gateway`] owns every registry and is driven by
//! the network service, the CLI, and the simulator alike.
//!
//! Every operator mutation follows the same order: validate, append the audit
//! record (durably), apply, persist state. A failed audit append aborts the
//! operation before anything changes.
//!
//! Data directory layout:
//!
//! | file          | contents                                             |
//! |---------------|------------------------------------------------------|
//! | `vault.key`   | 32-byte vault master secret                          |
//! | `vault.hgv`   | sealed key vault                                     |
//! | `root.hgc`    | gateway root certificate                             |
//! | `state.json`  | registry, enrollments, zones, revocations, alerts    |
//! | `audit.hgl`   | hash-chained audit log, `audit.head` its head hash   |
//! | `readings.hgr`| telemetry rows                                       |

use std::collections::BTreeSet;
use std::fs;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::codec::Writer;
use crate::config::Config;
use crate::enrollment::{
    wrap_device_key, ApprovalPayload, DeviceRecord, DeviceStatus, EnrollMessage, EnrollmentError,
    EnrollmentEvent, EnrollmentRequest, EnrollmentState, EnrollmentTable, Registry, RejectCode,
    RequestId, DEFAULT_VALIDITY_DAYS,
};
use crate::ids::{Alert, AlertRule, Sentinel, UnknownAlert};
use crate::pki::{
    generate_root_identity, verify_chain, Certificate, CertificateAuthority, GatewayIdentity,
    KeyVault, PkiError, RevocationEntry, RevocationList, Role, SerialSource, VaultHandle,
    VerifyOutcome,
};
use crate::relay::{self, IngestResult, ENROLL_MAGIC};
use crate::segmentation::{
    compile_policy, AddrBlock, Grant, RuleSet, Segmentation, SegmentationError, Zone, ZoneRole,
};
use crate::store::{
    self, AuditCategory, AuditLog, ChainStatus, EncryptedBundle, Query, ReadingStore,
    SeriesPoint, StoreError,
};
use crate::DeviceId;

pub const VAULT_KEY_FILE: &str = "vault.key";
pub const VAULT_FILE: &str = "vault.hgv";
pub const ROOT_CERT_FILE: &str = "root.hgc";
pub const STATE_FILE: &str = "state.json";
pub const GATEWAY_ZONE: &str = "gateway";
pub const GATEWAY_ZONE_ADDR: Ipv4Addr = Ipv4Addr::new(10, 10, 0, 1);

/// Length-revealing, content-constant-time comparison for bearer tokens.
fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("missing or invalid operator token")]
    Unauthorized,
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown enrollment request")]
    UnknownRequest,
    #[error("enrollment request is not pending")]
    NotPending,
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("unknown alert {0}")]
    UnknownAlert(u64),
    #[error("device is not quarantined")]
    NotQuarantined,
    #[error("device is revoked")]
    DeviceRevoked,
    #[error("data directory is already initialized")]
    AlreadyInitialized,
    #[error("data directory is not initialized: {0}")]
    UninitializedDataDir(String),
    #[error(transparent)]
    Enrollment(EnrollmentError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("state file: {0}")]
    State(String),
}

impl From<EnrollmentError> for GatewayError {
    fn from(e: EnrollmentError) -> Self {
        match e {
            EnrollmentError::NotPending => GatewayError::NotPending,
            EnrollmentError::UnknownRequest => GatewayError::UnknownRequest,
            EnrollmentError::UnknownZone(z) => GatewayError::UnknownZone(z),
            other => GatewayError::Enrollment(other),
        }
    }
}

impl From<UnknownAlert> for GatewayError {
    fn from(e: UnknownAlert) -> Self {
        GatewayError::UnknownAlert(e.0)
    }
}

impl From<std::io::Error> for GatewayError {
    fn from(e: std::io::Error) -> Self {
        GatewayError::Store(e.into())
    }
}

impl GatewayError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Unauthorized => "unauthorized",
            GatewayError::UnknownDevice(_) => "unknown_device",
            GatewayError::UnknownRequest => "unknown_request",
            GatewayError::NotPending => "not_pending",
            GatewayError::UnknownZone(_) => "unknown_zone",
            GatewayError::UnknownAlert(_) => "unknown_alert",
            GatewayError::NotQuarantined => "not_quarantined",
            GatewayError::DeviceRevoked => "device_revoked",
            GatewayError::AlreadyInitialized => "already_initialized",
            GatewayError::UninitializedDataDir(_) => "uninitialized_data_dir",
            GatewayError::Enrollment(EnrollmentError::DuplicatePending) => "duplicate_pending",
            GatewayError::Enrollment(EnrollmentError::RegistryFull) => "registry_full",
            GatewayError::Enrollment(_) => "invalid_enrollment",
            GatewayError::Segmentation(SegmentationError::DuplicateName(_)) => "duplicate_name",
            GatewayError::Segmentation(SegmentationError::OverlappingRange(..)) => {
                "overlapping_range"
            }
            GatewayError::Segmentation(SegmentationError::ZoneExhausted(_)) => "zone_exhausted",
            GatewayError::Segmentation(SegmentationError::UnknownZone(_)) => "unknown_zone",
            GatewayError::Segmentation(_) => "invalid_zone",
            GatewayError::Pki(_) => "pki_error",
            GatewayError::Store(StoreError::BadRange) => "bad_range",
            GatewayError::Store(StoreError::BadAggregate(_)) => "bad_aggregate",
            GatewayError::Store(StoreError::BadRecipient) => "bad_recipient",
            GatewayError::Store(_) => "storage_failure",
            GatewayError::State(_) => "storage_failure",
        }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Approve { zone: String },
    Deny { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum QuarantineCause {
    Operator,
    Ids { alert_id: u64 },
}

/// Operator-facing projection of a [`DeviceRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub device_id: DeviceId,
    pub name: String,
    pub zone: String,
    pub address: Ipv4Addr,
    pub status: DeviceStatus,
    pub role: Role,
    pub telemetry_key_epoch: u32,
    pub last_seq: u64,
    pub enrolled_at: u64,
    pub last_seen: Option<u64>,
    pub cert_serial: String,
    /// Certificate expiry, unix seconds.
    pub cert_not_after: u64,
    pub public_key: String,
}

impl From<&DeviceRecord> for DeviceView {
    fn from(d: &DeviceRecord) -> Self {
        DeviceView {
            device_id: d.device_id,
            name: d.name.clone(),
            zone: d.zone.clone(),
            address: d.address,
            status: d.status,
            role: d.certificate.role,
            telemetry_key_epoch: d.telemetry_key_epoch,
            last_seq: d.last_seq,
            enrolled_at: d.enrolled_at,
            last_seen: d.last_seen,
            cert_serial: hex::encode(d.certificate.serial.0),
            cert_not_after: d.certificate.not_after,
            public_key: hex::encode(d.certificate.public_key),
        }
    }
}

/// Pushed to live subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", content = "data", rename_all = "lowercase")]
pub enum GatewayEvent {
    Alert(Alert),
    Enrollment(EnrollmentRequest),
    Device(DeviceView),
}

impl GatewayEvent {
    pub fn name(&self) -> &'static str {
        match self {
            GatewayEvent::Alert(_) => "alert",
            GatewayEvent::Enrollment(_) => "enrollment",
            GatewayEvent::Device(_) => "device",
        }
    }
}

/// What happened to one inbound datagram.
#[derive(Debug, Clone)]
pub enum DatagramOutcome {
    Telemetry(IngestResult),
    /// An enrollment exchange; `reply` goes back to the sender.
    Enrollment { reply: Option<Vec<u8>> },
    /// Not a datagram this gateway understands.
    Ignored,
}

#[derive(Debug, Serialize, Deserialize)]
struct PersistedState {
    version: u32,
    #[serde(with = "crate::enrollment::cert_hex")]
    root_cert: Certificate,
    vault_handle: String,
    serials: SerialSource,
    registry: Registry,
    enrollments: EnrollmentTable,
    segmentation: Segmentation,
    revocations: Vec<RevocationEntry>,
    alerts: Vec<Alert>,
}

pub struct Gateway {
    config: Config,
    token: Option<String>,
    clock: Arc<dyn Clock>,
    rng: ChaCha20Rng,
    vault: KeyVault,
    ca: CertificateAuthority,
    revocations: RevocationList,
    enrollments: EnrollmentTable,
    registry: Registry,
    segmentation: Segmentation,
    sentinel: Sentinel,
    audit: AuditLog,
    readings: ReadingStore,
    events: Vec<GatewayEvent>,
    data_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("devices", &self.registry.len())
            .field("audit_len", &self.audit.len())
            .field("readings", &self.readings.len())
            .field("data_dir", &self.data_dir)
            .finish_non_exhaustive()
    }
}

fn gateway_zone(seg: &mut Segmentation) {
    seg.define_zone(GATEWAY_ZONE, AddrBlock::host(GATEWAY_ZONE_ADDR), ZoneRole::Gateway)
        .expect("empty segmentation accepts the gateway zone");
}

fn zone_body(name: &str, range: AddrBlock, role: ZoneRole) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(name)
        .raw(&range.base().octets())
        .u8(range.prefix())
        .u8(role as u8);
    w.finish()
}

impl Gateway {
    /// Creates a fresh identity in `data_dir`. With a seed, the root key and
    /// certificate are reproducible.
    pub fn init(data_dir: &Path, seed: Option<[u8; 32]>, clock: &dyn Clock) -> Result<GatewayIdentity> {
        if data_dir.join(STATE_FILE).exists() {
            return Err(GatewayError::AlreadyInitialized);
        }
        fs::create_dir_all(data_dir)?;
        let master = KeyVault::generate_master();
        let vault = KeyVault::new(master);
        let identity = generate_root_identity(&vault, clock.now_secs(), seed)?;
        let serials = match seed {
            Some(_) => SerialSource::Counter(2),
            None => SerialSource::Random,
        };
        let mut segmentation = Segmentation::new();
        gateway_zone(&mut segmentation);

        write_secret(&data_dir.join(VAULT_KEY_FILE), &master)?;
        vault.save(&data_dir.join(VAULT_FILE))?;
        identity.root_cert.save(&data_dir.join(ROOT_CERT_FILE))?;
        let mut audit = AuditLog::open_dir(data_dir)?;
        let mut w = Writer::new();
        w.raw(b"init").raw(&identity.root_cert.serial.0);
        audit.append(AuditCategory::Config, w.as_slice(), clock.now_ms())?;
        let state = PersistedState {
            version: 1,
            root_cert: identity.root_cert.clone(),
            vault_handle: identity.vault_handle.to_hex(),
            serials,
            registry: Registry::new(),
            enrollments: EnrollmentTable::new(),
            segmentation,
            revocations: Vec::new(),
            alerts: Vec::new(),
        };
        save_state(data_dir, &state)?;
        Ok(identity)
    }

    pub fn is_initialized(data_dir: &Path) -> bool {
        [VAULT_KEY_FILE, VAULT_FILE, STATE_FILE]
            .iter()
            .all(|f| data_dir.join(f).is_file())
    }

    /// Opens an initialized data directory, repairing a torn audit or
    /// readings tail left by a crash.
    pub fn open(config: Config, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = config.data_dir.clone();
        if !Self::is_initialized(&dir) {
            return Err(GatewayError::UninitializedDataDir(dir.display().to_string()));
        }
        let master: [u8; 32] = fs::read(dir.join(VAULT_KEY_FILE))?
            .try_into()
            .map_err(|_| GatewayError::State("vault.key must be 32 bytes".into()))?;
        let vault = KeyVault::load(master, &dir.join(VAULT_FILE))?;
        let raw = fs::read(dir.join(STATE_FILE))?;
        let state: PersistedState =
            serde_json::from_slice(&raw).map_err(|e| GatewayError::State(e.to_string()))?;
        let handle = VaultHandle::from_hex(&state.vault_handle)
            .ok_or_else(|| GatewayError::State("bad vault handle".into()))?;
        let identity = GatewayIdentity {
            root_cert: state.root_cert,
            vault_handle: handle,
        };
        let audit = AuditLog::open_dir(&dir)?;
        let readings = ReadingStore::open_dir(&dir, config.max_readings)?;
        let mut gw = Gateway {
            token: config.operator_token.clone(),
            sentinel: Sentinel::with_alerts(config.ids(), state.alerts),
            clock,
            rng: ChaCha20Rng::from_entropy(),
            ca: CertificateAuthority::new(identity, state.serials)?,
            vault,
            revocations: RevocationList::from_entries(state.revocations),
            enrollments: state.enrollments,
            registry: state.registry,
            segmentation: state.segmentation,
            audit,
            readings,
            events: Vec::new(),
            data_dir: Some(dir),
            config,
        };
        gw.rehydrate()?;
        Ok(gw)
    }

    /// A gateway with no files behind it. The seed fixes the root key and
    /// every random choice the gateway makes.
    pub fn in_memory(config: Config, clock: Arc<dyn Clock>, seed: [u8; 32]) -> Result<Self> {
        let vault = KeyVault::new(seed);
        let identity = generate_root_identity(&vault, clock.now_secs(), Some(seed))?;
        let mut segmentation = Segmentation::new();
        gateway_zone(&mut segmentation);
        let mut gw = Gateway {
            token: config.operator_token.clone(),
            sentinel: Sentinel::new(config.ids()),
            rng: ChaCha20Rng::from_seed(seed),
            ca: CertificateAuthority::new(identity, SerialSource::Counter(2))?,
            vault,
            revocations: RevocationList::new(),
            enrollments: EnrollmentTable::new(),
            registry: Registry::new(),
            segmentation,
            audit: AuditLog::in_memory(),
            readings: ReadingStore::new(config.max_readings),
            events: Vec::new(),
            data_dir: None,
            clock,
            config,
        };
        gw.rehydrate()?;
        Ok(gw)
    }

    /// Swaps the audit backend, for fault-injection tests.
    pub fn replace_audit_log(&mut self, audit: AuditLog) {
        self.audit = audit;
    }

    /// Recomputes cached telemetry keys and folds stored sequence numbers
    /// into `last_seq`, so a crash between a reading and the next state save
    /// can't reopen a replay window.
    fn rehydrate(&mut self) -> Result<()> {
        let handle = self.ca.identity().vault_handle;
        for d in self.registry.iter_mut() {
            d.telemetry_key = self
                .vault
                .derive_device_key(&handle, &d.device_id, d.telemetry_key_epoch)?;
            let stored_max = self
                .readings
                .rows(&d.device_id, 0, u64::MAX)
                .iter()
                .map(|r| r.seq)
                .max()
                .unwrap_or(0);
            d.last_seq = d.last_seq.max(stored_max);
            self.sentinel
                .note_enrolled(d.device_id, d.last_seen.unwrap_or(d.enrolled_at));
        }
        Ok(())
    }

    fn save(&self) -> Result<()> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        let state = PersistedState {
            version: 1,
            root_cert: self.ca.root().clone(),
            vault_handle: self.ca.identity().vault_handle.to_hex(),
            serials: self.ca.serial_source(),
            registry: self.registry.clone(),
            enrollments: self.enrollments.clone(),
            segmentation: self.segmentation.clone(),
            revocations: self.revocations.entries(),
            alerts: self.sentinel.alerts().to_vec(),
        };
        save_state(dir, &state)
    }

    /// Persists state and flushes readings to stable storage.
    pub fn flush(&mut self) -> Result<()> {
        self.readings.sync()?;
        self.save()
    }

    // ---- accessors ----

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn root_certificate(&self) -> &Certificate {
        self.ca.root()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn device(&self, id: &DeviceId) -> Option<&DeviceRecord> {
        self.registry.get(id)
    }

    pub fn devices(&self) -> Vec<DeviceView> {
        self.registry.iter().map(DeviceView::from).collect()
    }

    pub fn enrollments(&self) -> &EnrollmentTable {
        &self.enrollments
    }

    pub fn segmentation(&self) -> &Segmentation {
        &self.segmentation
    }

    pub fn zones(&self) -> Vec<Zone> {
        self.segmentation.zones().cloned().collect()
    }

    pub fn alerts(&self) -> &[Alert] {
        self.sentinel.alerts()
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    pub fn readings(&self) -> &ReadingStore {
        &self.readings
    }

    pub fn revocations(&self) -> &RevocationList {
        &self.revocations
    }

    pub fn drain_events(&mut self) -> Vec<GatewayEvent> {
        std::mem::take(&mut self.events)
    }

    /// Devices whose traffic the firewall must drop: quarantined or revoked.
    pub fn isolated_devices(&self) -> BTreeSet<DeviceId> {
        self.registry
            .iter()
            .filter(|d| d.status != DeviceStatus::Active)
            .map(|d| d.device_id)
            .collect()
    }

    pub fn policy(&self) -> RuleSet {
        compile_policy(&self.segmentation, &self.isolated_devices())
    }

    pub fn verify_certificate(&self, cert: &Certificate) -> VerifyOutcome {
        verify_chain(cert, self.ca.root(), &self.revocations, self.clock.now_secs())
    }

    /// Checks the durable log when there is one, the in-memory chain
    /// otherwise.
    pub fn verify_audit(&self) -> Result<ChainStatus> {
        match &self.data_dir {
            Some(dir) => Ok(store::verify_dir(dir)?),
            None => Ok(self.audit.verify()),
        }
    }

    pub fn check_token(&self, presented: Option<&str>) -> Result<()> {
        match (&self.token, presented) {
            (Some(expected), Some(p)) if ct_eq(expected.as_bytes(), p.as_bytes()) => Ok(()),
            _ => Err(GatewayError::Unauthorized),
        }
    }

    fn audit(&mut self, category: AuditCategory, body: &[u8]) -> Result<()> {
        let now = self.clock.now_ms();
        self.audit.append(category, body, now)?;
        Ok(())
    }

    fn device_event(&mut self, id: &DeviceId) {
        if let Some(d) = self.registry.get(id) {
            self.events.push(GatewayEvent::Device(d.into()));
        }
    }

    // ---- datagrams ----

    /// Entry point for every UDP datagram.
    pub fn handle_datagram(&mut self, datagram: &[u8], source: SocketAddr) -> DatagramOutcome {
        if datagram.len() >= 4 && &datagram[..4] == ENROLL_MAGIC {
            return DatagramOutcome::Enrollment {
                reply: self.handle_enroll_datagram(datagram, source),
            };
        }
        DatagramOutcome::Telemetry(self.ingest(datagram, source))
    }

    pub fn ingest(&mut self, datagram: &[u8], source: SocketAddr) -> IngestResult {
        let now = self.clock.now_ms();
        let result = relay::ingest(
            datagram,
            source,
            &mut self.registry,
            &mut self.sentinel,
            &mut self.readings,
            now,
        );
        let pruned = self.readings.take_pruned();
        if pruned > 0 {
            let mut w = Writer::new();
            w.raw(b"prune").u64(pruned);
            if let Err(e) = self.audit(AuditCategory::Config, w.as_slice()) {
                // The rows are already gone; the next prune will retry.
                eprintln!("audit append for pruning failed: {e}");
            }
            let _ = self.save();
        }
        if !result.alerts.is_empty() {
            self.after_alerts(&result.alerts);
        }
        result
    }

    fn after_alerts(&mut self, alerts: &[Alert]) {
        for a in alerts {
            self.events.push(GatewayEvent::Alert(a.clone()));
            if a.rule == AlertRule::R4Flood && self.sentinel.config().auto_quarantine {
                if let Some(id) = a.device_id {
                    let cause = QuarantineCause::Ids { alert_id: a.alert_id };
                    if let Err(e) = self.apply_quarantine(&id, cause) {
                        eprintln!("auto-quarantine of {id} failed: {e}");
                    }
                }
            }
        }
        let _ = self.save();
    }

    fn handle_enroll_datagram(&mut self, datagram: &[u8], source: SocketAddr) -> Option<Vec<u8>> {
        let Ok(EnrollMessage::Request { requested_name, csr }) = EnrollMessage::decode(datagram)
        else {
            return None;
        };
        let reject = |code| {
            Some(
                EnrollMessage::Rejected {
                    public_key: csr.public_key,
                    code,
                }
                .encode(),
            )
        };
        if let Some(dev) = self.registry.by_public_key(&csr.public_key) {
            if !csr.verify_proof() {
                return reject(RejectCode::Invalid);
            }
            return match dev.status {
                DeviceStatus::Active => {
                    let id = dev.device_id;
                    self.approval_payload(&id)
                        .ok()
                        .map(|p| EnrollMessage::Approved(p).encode())
                }
                DeviceStatus::Quarantined => reject(RejectCode::Denied),
                DeviceStatus::Revoked => reject(RejectCode::Revoked),
            };
        }
        if let Some(existing) = self.enrollments.pending_for_key(&csr.public_key) {
            if !csr.verify_proof() {
                return reject(RejectCode::Invalid);
            }
            return Some(
                EnrollMessage::Pending {
                    request_id: existing.request_id,
                    public_key: csr.public_key,
                }
                .encode(),
            );
        }
        let role = csr.role;
        let public_key = csr.public_key;
        let request_id = match self.submit_enrollment(csr.clone(), &requested_name, source) {
            Ok(id) => id,
            Err(GatewayError::Enrollment(EnrollmentError::RegistryFull)) => {
                return reject(RejectCode::Full)
            }
            Err(_) => return reject(RejectCode::Invalid),
        };
        if self.config.auto_approve {
            let wanted = if role == Role::Repeater {
                ZoneRole::Repeater
            } else {
                ZoneRole::Iot
            };
            let zone = self
                .segmentation
                .zones()
                .find(|z| z.role == wanted)
                .map(|z| z.name.clone());
            if let Some(zone) = zone {
                if let Ok(p) = self.approve(&request_id, &zone) {
                    return Some(EnrollMessage::Approved(p).encode());
                }
            }
        }
        Some(
            EnrollMessage::Pending {
                request_id,
                public_key,
            }
            .encode(),
        )
    }

    /// Fresh approval payload for an ACTIVE device at its current epoch. This
    /// is also how a released device picks up its new key.
    pub fn approval_payload(&mut self, id: &DeviceId) -> Result<ApprovalPayload> {
        let dev = self.registry.get(id).ok_or(GatewayError::UnknownDevice(*id))?;
        let mut eph = [0u8; 32];
        self.rng.fill_bytes(&mut eph);
        let key_wrap = wrap_device_key(
            &dev.certificate.public_key,
            &dev.telemetry_key,
            id,
            dev.telemetry_key_epoch,
            &eph,
        )
        .map_err(|_| GatewayError::Enrollment(EnrollmentError::InvalidProof))?;
        Ok(ApprovalPayload {
            device_id: *id,
            address: dev.address,
            epoch: dev.telemetry_key_epoch,
            certificate: dev.certificate.clone(),
            key_wrap,
        })
    }

    // ---- enrollment ----

    pub fn submit_enrollment(
        &mut self,
        csr: crate::pki::CertSigningRequest,
        requested_name: &str,
        source: SocketAddr,
    ) -> Result<RequestId> {
        let max = self.config.max_pending;
        self.enrollments.check_submission(&csr, requested_name, max)?;
        let mut id = [0u8; 16];
        self.rng.fill_bytes(&mut id);
        let request_id = RequestId(id);
        let mut w = Writer::new();
        w.raw(&request_id.0)
            .raw(&csr.public_key)
            .u8(csr.role as u8)
            .str(requested_name)
            .str(&source.to_string());
        self.audit(AuditCategory::Enroll, w.as_slice())?;
        let now = self.clock.now_ms();
        let req = self
            .enrollments
            .submit(request_id, csr, requested_name, source, now, max)?
            .clone();
        self.events.push(GatewayEvent::Enrollment(req));
        self.save()?;
        Ok(request_id)
    }

    pub fn decide_enrollment(
        &mut self,
        id: &RequestId,
        decision: Decision,
        token: Option<&str>,
    ) -> Result<Option<ApprovalPayload>> {
        self.check_token(token)?;
        match decision {
            Decision::Approve { zone } => self.approve(id, &zone).map(Some),
            Decision::Deny { reason } => self.deny(id, &reason).map(|_| None),
        }
    }

    fn pending(&self, id: &RequestId) -> Result<&EnrollmentRequest> {
        let req = self.enrollments.get(id).ok_or(GatewayError::UnknownRequest)?;
        if req.state != EnrollmentState::Pending {
            return Err(GatewayError::NotPending);
        }
        Ok(req)
    }

    fn approve(&mut self, id: &RequestId, zone: &str) -> Result<ApprovalPayload> {
        let req = self.pending(id)?.clone();
        if self.segmentation.zone(zone).is_none() {
            return Err(GatewayError::UnknownZone(zone.to_owned()));
        }
        let device_id = self.registry.peek_next_id();
        let address = self.segmentation.peek_assign(&device_id, zone)?;
        let now = self.clock.now_ms();
        let cert = self
            .ca
            .issue(&self.vault, &req.csr, DEFAULT_VALIDITY_DAYS, now / 1000)?;
        let handle = self.ca.identity().vault_handle;
        let telemetry_key = self.vault.derive_device_key(&handle, &device_id, 0)?;

        let mut w = Writer::new();
        w.raw(&id.0)
            .u8(1)
            .raw(&device_id.0)
            .str(zone)
            .raw(&address.octets())
            .raw(&cert.serial.0);
        self.audit(AuditCategory::Decide, w.as_slice())?;

        let allocated = self.registry.allocate_id();
        debug_assert_eq!(allocated, device_id);
        self.segmentation.assign_device(device_id, zone)?;
        let name = if req.requested_name.is_empty() {
            req.csr.subject.clone()
        } else {
            req.requested_name.clone()
        };
        self.registry.insert(DeviceRecord {
            device_id,
            name,
            certificate: cert,
            zone: zone.to_owned(),
            address,
            telemetry_key_epoch: 0,
            status: DeviceStatus::Active,
            last_seq: 0,
            enrolled_at: now,
            last_seen: None,
            telemetry_key,
        });
        let req = self.enrollments.transition(id, EnrollmentEvent::Approve)?;
        req.device_id = Some(device_id);
        let req = req.clone();
        self.sentinel.note_enrolled(device_id, now);
        self.events.push(GatewayEvent::Enrollment(req));
        self.device_event(&device_id);
        self.save()?;
        self.approval_payload(&device_id)
    }

    fn deny(&mut self, id: &RequestId, reason: &str) -> Result<()> {
        self.pending(id)?;
        let mut w = Writer::new();
        w.raw(&id.0).u8(0).str(truncate(reason, 256));
        self.audit(AuditCategory::Decide, w.as_slice())?;
        let req = self.enrollments.transition(id, EnrollmentEvent::Deny)?;
        req.reason = Some(reason.to_owned());
        let req = req.clone();
        self.events.push(GatewayEvent::Enrollment(req));
        self.save()
    }

    // ---- device lifecycle ----

    pub fn revoke_device(&mut self, id: &DeviceId, reason: &str, token: Option<&str>) -> Result<()> {
        self.check_token(token)?;
        let dev = self.registry.get(id).ok_or(GatewayError::UnknownDevice(*id))?;
        let serial = dev.certificate.serial;
        let mut w = Writer::new();
        w.raw(&id.0).raw(&serial.0).str(truncate(reason, 256));
        self.audit(AuditCategory::Revoke, w.as_slice())?;
        let now = self.clock.now_ms();
        self.revocations.revoke(serial, now / 1000, reason);
        if let Some(d) = self.registry.get_mut(id) {
            d.status = DeviceStatus::Revoked;
        }
        self.device_event(id);
        self.save()
    }

    /// Operator-initiated quarantine. Quarantining an already quarantined
    /// device succeeds without change.
    pub fn quarantine(&mut self, id: &DeviceId, token: Option<&str>) -> Result<()> {
        self.check_token(token)?;
        self.apply_quarantine(id, QuarantineCause::Operator)
    }

    fn apply_quarantine(&mut self, id: &DeviceId, cause: QuarantineCause) -> Result<()> {
        let dev = self.registry.get(id).ok_or(GatewayError::UnknownDevice(*id))?;
        match dev.status {
            DeviceStatus::Revoked => return Err(GatewayError::DeviceRevoked),
            DeviceStatus::Quarantined => return Ok(()),
            DeviceStatus::Active => {}
        }
        let mut w = Writer::new();
        w.raw(&id.0);
        match cause {
            QuarantineCause::Operator => w.u8(0).u64(0),
            QuarantineCause::Ids { alert_id } => w.u8(1).u64(alert_id),
        };
        self.audit(AuditCategory::Quarantine, w.as_slice())?;
        if let Some(d) = self.registry.get_mut(id) {
            d.status = DeviceStatus::Quarantined;
        }
        self.device_event(id);
        self.save()
    }

    /// Returns a quarantined device to service under a new key epoch.
    pub fn release(&mut self, id: &DeviceId, token: Option<&str>) -> Result<u32> {
        self.check_token(token)?;
        let dev = self.registry.get(id).ok_or(GatewayError::UnknownDevice(*id))?;
        if dev.status != DeviceStatus::Quarantined {
            return Err(GatewayError::NotQuarantined);
        }
        let epoch = dev.telemetry_key_epoch + 1;
        let handle = self.ca.identity().vault_handle;
        let key = self.vault.derive_device_key(&handle, id, epoch)?;
        let mut w = Writer::new();
        w.raw(&id.0).u32(epoch);
        self.audit(AuditCategory::Release, w.as_slice())?;
        if let Some(d) = self.registry.get_mut(id) {
            d.status = DeviceStatus::Active;
            d.telemetry_key_epoch = epoch;
            d.telemetry_key = key;
        }
        self.device_event(id);
        self.save()?;
        Ok(epoch)
    }

    // ---- segmentation ----

    pub fn define_zone(
        &mut self,
        name: &str,
        range: AddrBlock,
        role: ZoneRole,
        token: Option<&str>,
    ) -> Result<Zone> {
        self.check_token(token)?;
        self.segmentation.check_zone(name, range, role)?;
        self.audit(AuditCategory::Zone, &zone_body(name, range, role))?;
        let zone = self.segmentation.define_zone(name, range, role)?.clone();
        self.save()?;
        Ok(zone)
    }

    pub fn add_grant(&mut self, from: &str, grant: Grant, token: Option<&str>) -> Result<()> {
        self.check_token(token)?;
        self.segmentation.check_grant(from, &grant)?;
        let mut w = Writer::new();
        w.str(from)
            .str(&grant.zone)
            .u16(grant.port.unwrap_or(0))
            .u8(grant.proto as u8);
        self.audit(AuditCategory::Policy, w.as_slice())?;
        self.segmentation.add_grant(from, grant)?;
        self.save()
    }

    // ---- alerts, telemetry, export ----

    pub fn acknowledge_alert(&mut self, alert_id: u64, token: Option<&str>) -> Result<Alert> {
        self.check_token(token)?;
        if !self.sentinel.alerts().iter().any(|a| a.alert_id == alert_id) {
            return Err(GatewayError::UnknownAlert(alert_id));
        }
        let mut w = Writer::new();
        w.raw(b"ack").u64(alert_id);
        self.audit(AuditCategory::Config, w.as_slice())?;
        let alert = self.sentinel.acknowledge(alert_id)?.clone();
        self.save()?;
        Ok(alert)
    }

    pub fn query_telemetry(&self, id: &DeviceId, q: &Query) -> Result<Vec<SeriesPoint>> {
        if self.registry.get(id).is_none() {
            return Err(GatewayError::UnknownDevice(*id));
        }
        Ok(self.readings.query(id, q)?)
    }

    /// Encrypts every reading with a device timestamp in `[from, to]` to
    /// `recipient` (an X25519 public key). An empty range still yields a
    /// valid, audited bundle.
    pub fn export(
        &mut self,
        from: u64,
        to: u64,
        recipient: &[u8; 32],
        token: Option<&str>,
    ) -> Result<EncryptedBundle> {
        self.check_token(token)?;
        if from > to {
            return Err(StoreError::BadRange.into());
        }
        let mut eph = [0u8; 32];
        let mut key = [0u8; 32];
        self.rng.fill_bytes(&mut eph);
        self.rng.fill_bytes(&mut key);
        let now = self.clock.now_ms();
        let rows = self.readings.rows_all(from, to);
        let bundle = store::seal_bundle(&rows, from, to, now, recipient, &eph, &key)?;
        let mut w = Writer::new();
        w.raw(&bundle.hash())
            .u64(from)
            .u64(to)
            .u32(bundle.header.count)
            .u16(bundle.header.devices.len() as u16);
        self.audit(AuditCategory::Export, w.as_slice())?;
        Ok(bundle)
    }

    // ---- time-driven work ----

    /// Expires stale enrollment requests and evaluates time-based rules.
    pub fn tick(&mut self) -> Vec<Alert> {
        let now = self.clock.now_ms();
        let ttl = u64::from(self.config.pending_ttl_s) * 1000;
        let stale: Vec<RequestId> = self
            .enrollments
            .list(Some(EnrollmentState::Pending))
            .iter()
            .filter(|r| now.saturating_sub(r.received_at) > ttl)
            .map(|r| r.request_id)
            .collect();
        for id in stale {
            let mut w = Writer::new();
            w.raw(b"expire").raw(&id.0);
            if self.audit(AuditCategory::Enroll, w.as_slice()).is_err() {
                break;
            }
            if let Ok(req) = self.enrollments.transition(&id, EnrollmentEvent::Expire) {
                let req = req.clone();
                self.events.push(GatewayEvent::Enrollment(req));
            }
        }
        let active: Vec<DeviceId> = self
            .registry
            .iter()
            .filter(|d| d.status == DeviceStatus::Active)
            .map(|d| d.device_id)
            .collect();
        let alerts = self.sentinel.tick(now, &active);
        for a in &alerts {
            self.events.push(GatewayEvent::Alert(a.clone()));
        }
        let _ = self.save();
        alerts
    }
}

fn truncate(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

fn save_state(dir: &Path, state: &PersistedState) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(state).map_err(|e| GatewayError::State(e.to_string()))?;
    crate::fsutil::write_atomic(&dir.join(STATE_FILE), &bytes)?;
    Ok(())
}

fn write_secret(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    crate::fsutil::write_atomic(path, bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    }
    Ok(())
}
