//! Device on-boarding: request table, device registry, telemetry key
//! derivation, and the key-wrap that delivers telemetry keys to devices.
//!
//! Enrollment datagrams reuse the envelope framing so a repeater can relay
//! them: `"HGE1" || version || hop_count || message type || body`.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr};

use ed25519_dalek::{SigningKey, VerifyingKey};
use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::pki::{CertSigningRequest, Certificate, PkiError, Role};
use crate::relay::{ENROLL_MAGIC, HOP_OFFSET, VERSION};
use crate::seal::{self, SealError};
use crate::DeviceId;

pub const TELEMETRY_KDF_SALT: &[u8] = b"HGT1-telemetry";
pub const KEY_WRAP_LABEL: &[u8] = b"HGW1-keywrap";
pub const MAX_REQUESTED_NAME: usize = 64;
pub const DEFAULT_VALIDITY_DAYS: u32 = 365;
pub const DEFAULT_MAX_PENDING: usize = 1024;
pub const DEFAULT_PENDING_TTL_S: u32 = 600;
pub const ENROLL_HEADER_LEN: usize = 7;

/// HKDF-SHA256(salt = "HGT1-telemetry", ikm = master, info = device_id || epoch).
pub fn derive_device_key(master_secret: &[u8; 32], device_id: &DeviceId, epoch: u32) -> [u8; 32] {
    let mut info = [0u8; 12];
    info[..8].copy_from_slice(&device_id.0);
    info[8..].copy_from_slice(&epoch.to_be_bytes());
    let mut key = [0u8; 32];
    Hkdf::<Sha256>::new(Some(TELEMETRY_KDF_SALT), master_secret)
        .expand(&info, &mut key)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    key
}

fn wrap_aad(device_id: &DeviceId, epoch: u32) -> [u8; 12] {
    let mut aad = [0u8; 12];
    aad[..8].copy_from_slice(&device_id.0);
    aad[8..].copy_from_slice(&epoch.to_be_bytes());
    aad
}

/// Encrypts a telemetry key to the device's enrollment (Ed25519) public key,
/// using its Montgomery form for the ephemeral agreement.
pub fn wrap_device_key(
    device_public_key: &[u8; 32],
    telemetry_key: &[u8; 32],
    device_id: &DeviceId,
    epoch: u32,
    ephemeral_secret: &[u8; 32],
) -> Result<Vec<u8>, SealError> {
    let vk = VerifyingKey::from_bytes(device_public_key).map_err(|_| SealError::WeakKey)?;
    let recipient = vk.to_montgomery().to_bytes();
    seal::seal(
        KEY_WRAP_LABEL,
        &recipient,
        ephemeral_secret,
        telemetry_key,
        &wrap_aad(device_id, epoch),
    )
}

/// Device-side inverse of [`wrap_device_key`].
pub fn unwrap_device_key(
    device_key: &SigningKey,
    blob: &[u8],
    device_id: &DeviceId,
    epoch: u32,
) -> Result<[u8; 32], SealError> {
    let plain = seal::open(
        KEY_WRAP_LABEL,
        &device_key.to_scalar_bytes(),
        blob,
        &wrap_aad(device_id, epoch),
    )?;
    plain.try_into().map_err(|_| SealError::AuthFailure)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(pub [u8; 16]);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RequestId({self})")
    }
}

impl std::str::FromStr for RequestId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out)?;
        Ok(RequestId(out))
    }
}

impl Serialize for RequestId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RequestId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum EnrollmentError {
    #[error("proof of possession does not verify")]
    InvalidProof,
    #[error("role {0:?} may not be requested")]
    RoleForbidden(Role),
    #[error("a pending request already exists for this public key")]
    DuplicatePending,
    #[error("enrollment table is full")]
    RegistryFull,
    #[error("requested name longer than {MAX_REQUESTED_NAME} bytes")]
    NameTooLong,
    #[error("request is not pending")]
    NotPending,
    #[error("unknown enrollment request")]
    UnknownRequest,
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("unknown device")]
    UnknownDevice,
}

impl From<PkiError> for EnrollmentError {
    fn from(e: PkiError) -> Self {
        match e {
            PkiError::RoleForbidden(r) => EnrollmentError::RoleForbidden(r),
            _ => EnrollmentError::InvalidProof,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnrollmentState {
    Pending,
    Approved,
    Denied,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnrollmentEvent {
    Approve,
    Deny,
    Expire,
}

impl EnrollmentState {
    pub const ALL: [EnrollmentState; 4] = [
        EnrollmentState::Pending,
        EnrollmentState::Approved,
        EnrollmentState::Denied,
        EnrollmentState::Expired,
    ];

    /// The only legal transitions leave PENDING; terminal states never move.
    pub fn apply(self, event: EnrollmentEvent) -> Result<EnrollmentState, EnrollmentError> {
        match (self, event) {
            (EnrollmentState::Pending, EnrollmentEvent::Approve) => Ok(EnrollmentState::Approved),
            (EnrollmentState::Pending, EnrollmentEvent::Deny) => Ok(EnrollmentState::Denied),
            (EnrollmentState::Pending, EnrollmentEvent::Expire) => Ok(EnrollmentState::Expired),
            _ => Err(EnrollmentError::NotPending),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentRequest {
    pub request_id: RequestId,
    #[serde(with = "csr_hex")]
    pub csr: CertSigningRequest,
    pub requested_name: String,
    pub received_at: u64,
    pub source_address: SocketAddr,
    pub state: EnrollmentState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<DeviceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

mod csr_hex {
    use super::CertSigningRequest;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(csr: &CertSigningRequest, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(csr.encode()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CertSigningRequest, D::Error> {
        let raw = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        CertSigningRequest::decode(&raw).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod cert_hex {
    use crate::pki::Certificate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &Certificate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(c.encode()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Certificate, D::Error> {
        let raw = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        Certificate::decode(&raw).map_err(serde::de::Error::custom)
    }
}

/// Pending and decided requests. Every state change goes through
/// [`EnrollmentTable::transition`], which checks and moves in one step.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct EnrollmentTable {
    requests: BTreeMap<RequestId, EnrollmentRequest>,
}

impl EnrollmentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &RequestId) -> Option<&EnrollmentRequest> {
        self.requests.get(id)
    }

    pub fn pending_count(&self) -> usize {
        self.requests
            .values()
            .filter(|r| r.state == EnrollmentState::Pending)
            .count()
    }

    pub fn pending_for_key(&self, public_key: &[u8; 32]) -> Option<&EnrollmentRequest> {
        self.requests
            .values()
            .find(|r| r.state == EnrollmentState::Pending && &r.csr.public_key == public_key)
    }

    /// Requests ordered by arrival, optionally filtered by state.
    pub fn list(&self, state: Option<EnrollmentState>) -> Vec<&EnrollmentRequest> {
        let mut v: Vec<_> = self
            .requests
            .values()
            .filter(|r| state.map_or(true, |s| r.state == s))
            .collect();
        v.sort_by_key(|r| (r.received_at, r.request_id));
        v
    }

    /// Validates a submission without storing it.
    pub fn check_submission(
        &self,
        csr: &CertSigningRequest,
        requested_name: &str,
        max_pending: usize,
    ) -> Result<(), EnrollmentError> {
        if csr.role == Role::Root {
            return Err(EnrollmentError::RoleForbidden(Role::Root));
        }
        if !csr.verify_proof() {
            return Err(EnrollmentError::InvalidProof);
        }
        if requested_name.len() > MAX_REQUESTED_NAME {
            return Err(EnrollmentError::NameTooLong);
        }
        if self.pending_for_key(&csr.public_key).is_some() {
            return Err(EnrollmentError::DuplicatePending);
        }
        if self.pending_count() >= max_pending {
            return Err(EnrollmentError::RegistryFull);
        }
        Ok(())
    }

    pub fn submit(
        &mut self,
        request_id: RequestId,
        csr: CertSigningRequest,
        requested_name: &str,
        source_address: SocketAddr,
        now_ms: u64,
        max_pending: usize,
    ) -> Result<&EnrollmentRequest, EnrollmentError> {
        self.check_submission(&csr, requested_name, max_pending)?;
        let req = EnrollmentRequest {
            request_id,
            csr,
            requested_name: requested_name.to_owned(),
            received_at: now_ms,
            source_address,
            state: EnrollmentState::Pending,
            device_id: None,
            reason: None,
        };
        Ok(self.requests.entry(request_id).or_insert(req))
    }

    /// Compare-and-transition for one request.
    pub fn transition(
        &mut self,
        id: &RequestId,
        event: EnrollmentEvent,
    ) -> Result<&mut EnrollmentRequest, EnrollmentError> {
        let req = self
            .requests
            .get_mut(id)
            .ok_or(EnrollmentError::UnknownRequest)?;
        req.state = req.state.apply(event)?;
        Ok(req)
    }

    /// Moves PENDING requests older than `ttl_ms` to EXPIRED.
    pub fn sweep(&mut self, now_ms: u64, ttl_ms: u64) -> Vec<RequestId> {
        let mut expired = Vec::new();
        for req in self.requests.values_mut() {
            if req.state == EnrollmentState::Pending && now_ms.saturating_sub(req.received_at) > ttl_ms {
                req.state = EnrollmentState::Expired;
                expired.push(req.request_id);
            }
        }
        expired
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeviceStatus {
    Active,
    Quarantined,
    Revoked,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: DeviceId,
    pub name: String,
    #[serde(with = "cert_hex")]
    pub certificate: Certificate,
    pub zone: String,
    pub address: Ipv4Addr,
    pub telemetry_key_epoch: u32,
    pub status: DeviceStatus,
    pub last_seq: u64,
    pub enrolled_at: u64,
    #[serde(default)]
    pub last_seen: Option<u64>,
    /// Cached derivation of the vault secret; never persisted or exported.
    #[serde(skip)]
    pub telemetry_key: [u8; 32],
}

/// The gateway's view of the fleet.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct Registry {
    devices: BTreeMap<DeviceId, DeviceRecord>,
    next_device: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self {
            devices: BTreeMap::new(),
            next_device: 1,
        }
    }

    /// The id the next [`Registry::allocate_id`] call will return.
    pub fn peek_next_id(&self) -> DeviceId {
        DeviceId::from_u64(self.next_device.max(1))
    }

    pub fn allocate_id(&mut self) -> DeviceId {
        let id = self.peek_next_id();
        self.next_device = id.as_u64() + 1;
        id
    }

    pub fn insert(&mut self, record: DeviceRecord) {
        self.devices.insert(record.device_id, record);
    }

    pub fn get(&self, id: &DeviceId) -> Option<&DeviceRecord> {
        self.devices.get(id)
    }

    pub fn get_mut(&mut self, id: &DeviceId) -> Option<&mut DeviceRecord> {
        self.devices.get_mut(id)
    }

    pub fn by_public_key(&self, pk: &[u8; 32]) -> Option<&DeviceRecord> {
        self.devices.values().find(|d| &d.certificate.public_key == pk)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DeviceRecord> {
        self.devices.values_mut()
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    /// `last_seq` never moves backwards.
    pub fn record_seq(&mut self, id: &DeviceId, seq: u64, now_ms: u64) {
        if let Some(d) = self.devices.get_mut(id) {
            d.last_seq = d.last_seq.max(seq);
            d.last_seen = Some(now_ms);
        }
    }
}

/// What an approved device receives: identity, address, and its wrapped key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApprovalPayload {
    pub device_id: DeviceId,
    pub address: Ipv4Addr,
    pub epoch: u32,
    pub certificate: Certificate,
    pub key_wrap: Vec<u8>,
}

impl ApprovalPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(300);
        w.raw(&self.device_id.0)
            .raw(&self.address.octets())
            .u32(self.epoch)
            .bytes(&self.certificate.encode())
            .bytes(&self.key_wrap);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ApprovalPayload {
            device_id: DeviceId(r.array()?),
            address: Ipv4Addr::from(r.array::<4>()?),
            epoch: r.u32()?,
            certificate: Certificate::decode(r.bytes()?)?,
            key_wrap: r.bytes()?.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectCode {
    Denied = 1,
    Invalid = 2,
    Revoked = 3,
    Full = 4,
}

impl TryFrom<u8> for RejectCode {
    type Error = CodecError;

    fn try_from(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            1 => RejectCode::Denied,
            2 => RejectCode::Invalid,
            3 => RejectCode::Revoked,
            4 => RejectCode::Full,
            other => {
                return Err(CodecError::InvalidValue {
                    field: "reject code",
                    value: other.into(),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnrollMessage {
    Request {
        requested_name: String,
        csr: CertSigningRequest,
    },
    Approved(ApprovalPayload),
    Pending {
        request_id: RequestId,
        public_key: [u8; 32],
    },
    Rejected {
        public_key: [u8; 32],
        code: RejectCode,
    },
}

impl EnrollMessage {
    fn type_byte(&self) -> u8 {
        match self {
            EnrollMessage::Request { .. } => 1,
            EnrollMessage::Approved(_) => 2,
            EnrollMessage::Pending { .. } => 3,
            EnrollMessage::Rejected { .. } => 4,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(320);
        w.raw(ENROLL_MAGIC).u8(VERSION).u8(0).u8(self.type_byte());
        match self {
            EnrollMessage::Request {
                requested_name,
                csr,
            } => {
                w.str(requested_name).raw(&csr.encode());
            }
            EnrollMessage::Approved(p) => {
                w.raw(&p.encode());
            }
            EnrollMessage::Pending {
                request_id,
                public_key,
            } => {
                w.raw(&request_id.0).raw(public_key);
            }
            EnrollMessage::Rejected { public_key, code } => {
                w.raw(public_key).u8(*code as u8);
            }
        }
        w.finish()
    }

    /// Parses an enrollment datagram; the hop byte is ignored.
    pub fn decode(datagram: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(datagram);
        if r.take(4)? != ENROLL_MAGIC {
            return Err(CodecError::InvalidValue {
                field: "magic",
                value: 0,
            });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(CodecError::InvalidValue {
                field: "version",
                value: version.into(),
            });
        }
        debug_assert_eq!(r.position(), HOP_OFFSET);
        let _hops = r.u8()?;
        let msg = match r.u8()? {
            1 => {
                let requested_name = r.bounded_str("requested_name", MAX_REQUESTED_NAME)?;
                let csr = CertSigningRequest::decode(r.rest())?;
                EnrollMessage::Request {
                    requested_name,
                    csr,
                }
            }
            2 => EnrollMessage::Approved(ApprovalPayload::read(&mut r)?),
            3 => EnrollMessage::Pending {
                request_id: RequestId(r.array()?),
                public_key: r.array()?,
            },
            4 => EnrollMessage::Rejected {
                public_key: r.array()?,
                code: RejectCode::try_from(r.u8()?)?,
            },
            other => {
                return Err(CodecError::InvalidValue {
                    field: "message type",
                    value: other.into(),
                })
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csr(byte: u8) -> CertSigningRequest {
        CertSigningRequest::new(&SigningKey::from_bytes(&[byte; 32]), "dev", Role::Device).unwrap()
    }

    fn src() -> SocketAddr {
        "192.0.2.1:4000".parse().unwrap()
    }

    // Frozen from tests/vectors/gen_vectors.py (pyca/cryptography HKDF).
    #[test]
    fn device_key_matches_reference_kdf() {
        let master: [u8; 32] = std::array::from_fn(|i| i as u8);
        let id = DeviceId::from_u64(0x0102030405060708);
        assert_eq!(
            hex::encode(derive_device_key(&master, &id, 0)),
            "33069043c5d38c7222440fe5dab1c6421ba6999f82a104b9f4cdec818a36072c"
        );
        assert_eq!(
            hex::encode(derive_device_key(&master, &id, 1)),
            "1211d9823cbe8bbaa8e935ae19dec8f6e8eb86e394a468590a23b24f544bf044"
        );
        assert_eq!(derive_device_key(&master, &id, 0), derive_device_key(&master, &id, 0));
    }

    #[test]
    fn state_machine_is_exhaustive() {
        let events = [
            EnrollmentEvent::Approve,
            EnrollmentEvent::Deny,
            EnrollmentEvent::Expire,
        ];
        for s in EnrollmentState::ALL {
            for e in events {
                let r = s.apply(e);
                match (s, e) {
                    (EnrollmentState::Pending, EnrollmentEvent::Approve) => {
                        assert_eq!(r.unwrap(), EnrollmentState::Approved)
                    }
                    (EnrollmentState::Pending, EnrollmentEvent::Deny) => {
                        assert_eq!(r.unwrap(), EnrollmentState::Denied)
                    }
                    (EnrollmentState::Pending, EnrollmentEvent::Expire) => {
                        assert_eq!(r.unwrap(), EnrollmentState::Expired)
                    }
                    _ => assert!(matches!(r, Err(EnrollmentError::NotPending))),
                }
            }
        }
    }

    #[test]
    fn submit_rules() {
        let mut t = EnrollmentTable::new();
        t.submit(RequestId([1; 16]), csr(1), "a", src(), 0, 2).unwrap();
        assert!(matches!(
            t.submit(RequestId([2; 16]), csr(1), "a", src(), 0, 2),
            Err(EnrollmentError::DuplicatePending)
        ));
        let mut forged = csr(2);
        forged.proof[0] ^= 1;
        assert!(matches!(
            t.submit(RequestId([3; 16]), forged, "b", src(), 0, 2),
            Err(EnrollmentError::InvalidProof)
        ));
        let root = CertSigningRequest::new(&SigningKey::from_bytes(&[5; 32]), "r", Role::Root).unwrap();
        assert!(matches!(
            t.submit(RequestId([4; 16]), root, "r", src(), 0, 2),
            Err(EnrollmentError::RoleForbidden(Role::Root))
        ));
        t.submit(RequestId([5; 16]), csr(6), "c", src(), 0, 2).unwrap();
        assert!(matches!(
            t.submit(RequestId([6; 16]), csr(7), "d", src(), 0, 2),
            Err(EnrollmentError::RegistryFull)
        ));
    }

    #[test]
    fn sweep_expires_and_blocks_approval() {
        let mut t = EnrollmentTable::new();
        let id = RequestId([1; 16]);
        t.submit(id, csr(1), "a", src(), 1_000, 10).unwrap();
        assert!(t.sweep(601_000, 600_000).is_empty());
        assert_eq!(t.sweep(601_001, 600_000), vec![id]);
        assert!(matches!(
            t.transition(&id, EnrollmentEvent::Approve),
            Err(EnrollmentError::NotPending)
        ));
        // key is free again once the old request expired
        t.submit(RequestId([2; 16]), csr(1), "a", src(), 700_000, 10).unwrap();
    }

    #[test]
    fn key_wrap_round_trip_and_binding() {
        let dev = SigningKey::from_bytes(&[0x42; 32]);
        let pk = dev.verifying_key().to_bytes();
        let id = DeviceId::from_u64(9);
        let blob = wrap_device_key(&pk, &[7; 32], &id, 3, &[1; 32]).unwrap();
        assert_eq!(blob.len(), 32 + 32 + 16);
        assert_eq!(unwrap_device_key(&dev, &blob, &id, 3).unwrap(), [7; 32]);
        assert!(unwrap_device_key(&dev, &blob, &id, 4).is_err());
        assert!(unwrap_device_key(&SigningKey::from_bytes(&[1; 32]), &blob, &id, 3).is_err());
    }

    #[test]
    fn enroll_messages_round_trip() {
        let msgs = [
            EnrollMessage::Request {
                requested_name: "kitchen".into(),
                csr: csr(3),
            },
            EnrollMessage::Pending {
                request_id: RequestId([9; 16]),
                public_key: [4; 32],
            },
            EnrollMessage::Rejected {
                public_key: [4; 32],
                code: RejectCode::Denied,
            },
        ];
        for m in msgs {
            let mut bytes = m.encode();
            assert_eq!(&bytes[..4], b"HGE1");
            bytes[HOP_OFFSET] = 1;
            assert_eq!(EnrollMessage::decode(&bytes).unwrap(), m);
        }
        assert!(EnrollMessage::decode(b"HGE1\x01\x00\x09").is_err());
        assert!(EnrollMessage::decode(b"HGT1").is_err());
    }
}
