//! Private certificate hierarchy and the sealed key vault.
//!
//! Certificates keep X.509 semantics (subject, issuer, validity window, role)
//! but use the crate's canonical encoding instead of DER. Signatures are
//! Ed25519. The gateway root is the only issuer; there are no intermediates.
//!
//! Private keys live exclusively inside [`KeyVault`]. Callers hold an opaque
//! [`VaultHandle`] and can ask the vault to sign or derive, never to export.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::{Mutex, RwLock};

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};

pub const MAX_NAME_LEN: usize = 128;
pub const ROOT_SUBJECT: &str = "homegate-root";
pub const ROOT_VALIDITY_DAYS: u64 = 3650;
const SECS_PER_DAY: u64 = 86_400;

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("proof of possession does not verify")]
    InvalidProof,
    #[error("role {0:?} may not be requested")]
    RoleForbidden(Role),
    #[error("issuer certificate is not a root")]
    NotRoot,
    #[error("unknown vault handle")]
    UnknownHandle,
    #[error("validity must be at least one day")]
    InvalidValidity,
    #[error("name longer than {MAX_NAME_LEN} bytes")]
    NameTooLong,
    #[error("vault storage failure: {0}")]
    VaultStorage(String),
    #[error("malformed encoding: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Root = 0,
    Device = 1,
    Operator = 2,
    Repeater = 3,
}

impl TryFrom<u8> for Role {
    type Error = CodecError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            0 => Role::Root,
            1 => Role::Device,
            2 => Role::Operator,
            3 => Role::Repeater,
            other => {
                return Err(CodecError::InvalidValue {
                    field: "role",
                    value: other.into(),
                })
            }
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Serial(pub [u8; 16]);

impl Serial {
    pub fn from_counter(n: u128) -> Self {
        Serial(n.to_be_bytes())
    }
}

impl fmt::Display for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Serial({self})")
    }
}

impl Serialize for Serial {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Serial {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 16];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Serial(out))
    }
}

pub fn verify_signature(public_key: &[u8; 32], message: &[u8], signature: &[u8; 64]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    vk.verify(message, &Signature::from_bytes(signature)).is_ok()
}

#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    pub serial: Serial,
    pub subject: String,
    pub issuer: String,
    pub role: Role,
    pub not_before: u64,
    pub not_after: u64,
    pub public_key: [u8; 32],
    pub signature: [u8; 64],
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("serial", &self.serial)
            .field("subject", &self.subject)
            .field("issuer", &self.issuer)
            .field("role", &self.role)
            .field("not_before", &self.not_before)
            .field("not_after", &self.not_after)
            .field("public_key", &hex::encode(self.public_key))
            .finish_non_exhaustive()
    }
}

impl Certificate {
    /// Canonical bytes of every field preceding the signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(160);
        w.raw(&self.serial.0)
            .str(&self.subject)
            .str(&self.issuer)
            .u8(self.role as u8)
            .u64(self.not_before)
            .u64(self.not_after)
            .raw(&self.public_key);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let cert = Self::read(&mut r)?;
        r.finish()?;
        Ok(cert)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Certificate {
            serial: Serial(r.array()?),
            subject: r.bounded_str("subject", MAX_NAME_LEN)?,
            issuer: r.bounded_str("issuer", MAX_NAME_LEN)?,
            role: Role::try_from(r.u8()?)?,
            not_before: r.u64()?,
            not_after: r.u64()?,
            public_key: r.array()?,
            signature: r.array()?,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::fsutil::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Self-signed statement of a public key and the identity it asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertSigningRequest {
    pub subject: String,
    pub role: Role,
    pub public_key: [u8; 32],
    pub proof: [u8; 64],
}

impl CertSigningRequest {
    /// Device-side construction: signs the request with the device's own key.
    pub fn new(key: &SigningKey, subject: &str, role: Role) -> Result<Self, PkiError> {
        if subject.len() > MAX_NAME_LEN {
            return Err(PkiError::NameTooLong);
        }
        let mut csr = CertSigningRequest {
            subject: subject.to_owned(),
            role,
            public_key: key.verifying_key().to_bytes(),
            proof: [0; 64],
        };
        csr.proof = key.sign(&csr.signed_bytes()).to_bytes();
        Ok(csr)
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(40 + self.subject.len());
        w.str(&self.subject).u8(self.role as u8).raw(&self.public_key);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.proof);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let csr = CertSigningRequest {
            subject: r.bounded_str("subject", MAX_NAME_LEN)?,
            role: Role::try_from(r.u8()?)?,
            public_key: r.array()?,
            proof: r.array()?,
        };
        r.finish()?;
        Ok(csr)
    }

    pub fn verify_proof(&self) -> bool {
        verify_signature(&self.public_key, &self.signed_bytes(), &self.proof)
    }

    /// Proof check plus the role gate applied before issuance.
    pub fn validate(&self) -> Result<(), PkiError> {
        if !self.verify_proof() {
            return Err(PkiError::InvalidProof);
        }
        if self.role == Role::Root {
            return Err(PkiError::RoleForbidden(Role::Root));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct VaultHandle([u8; 16]);

impl VaultHandle {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(VaultHandle(out))
    }
}

impl fmt::Debug for VaultHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VaultHandle({})", self.to_hex())
    }
}

struct VaultEntry {
    signing: SigningKey,
    secret: [u8; 32],
}

const VAULT_MAGIC: &[u8; 4] = b"HGV1";
const VAULT_VERSION: u8 = 1;

/// Software stand-in for a TPM: key material enters once and never leaves.
///
/// The on-disk form is a single AEAD-sealed blob keyed from a 32-byte master
/// secret kept in a separate file.
pub struct KeyVault {
    master: [u8; 32],
    entries: RwLock<HashMap<VaultHandle, VaultEntry>>,
}

impl fmt::Debug for KeyVault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.entries.read().map(|e| e.len()).unwrap_or(0);
        f.debug_struct("KeyVault").field("entries", &n).finish_non_exhaustive()
    }
}

impl KeyVault {
    pub fn new(master: [u8; 32]) -> Self {
        Self {
            master,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn generate_master() -> [u8; 32] {
        let mut m = [0u8; 32];
        OsRng.fill_bytes(&mut m);
        m
    }

    pub(crate) fn insert(&self, signing_seed: [u8; 32], secret: [u8; 32]) -> VaultHandle {
        let mut h = [0u8; 16];
        OsRng.fill_bytes(&mut h);
        let handle = VaultHandle(h);
        self.entries.write().expect("vault lock poisoned").insert(
            handle,
            VaultEntry {
                signing: SigningKey::from_bytes(&signing_seed),
                secret,
            },
        );
        handle
    }

    pub fn generate(&self) -> VaultHandle {
        let mut seed = [0u8; 32];
        let mut secret = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        OsRng.fill_bytes(&mut secret);
        self.insert(seed, secret)
    }

    pub fn contains(&self, handle: &VaultHandle) -> bool {
        self.entries
            .read()
            .expect("vault lock poisoned")
            .contains_key(handle)
    }

    pub fn public_key(&self, handle: &VaultHandle) -> Result<[u8; 32], PkiError> {
        let entries = self.entries.read().expect("vault lock poisoned");
        let e = entries.get(handle).ok_or(PkiError::UnknownHandle)?;
        Ok(e.signing.verifying_key().to_bytes())
    }

    /// Deterministic Ed25519 signature under the handle's key.
    pub fn sign(&self, handle: &VaultHandle, message: &[u8]) -> Result<[u8; 64], PkiError> {
        let entries = self.entries.read().expect("vault lock poisoned");
        let e = entries.get(handle).ok_or(PkiError::UnknownHandle)?;
        Ok(e.signing.sign(message).to_bytes())
    }

    /// Telemetry key for a device, derived from the handle's secret material.
    pub fn derive_device_key(
        &self,
        handle: &VaultHandle,
        device_id: &crate::DeviceId,
        epoch: u32,
    ) -> Result<[u8; 32], PkiError> {
        let entries = self.entries.read().expect("vault lock poisoned");
        let e = entries.get(handle).ok_or(PkiError::UnknownHandle)?;
        Ok(crate::enrollment::derive_device_key(&e.secret, device_id, epoch))
    }

    fn seal_key(&self) -> [u8; 32] {
        let mut k = [0u8; 32];
        Hkdf::<Sha256>::new(Some(b"HGV1-vault"), &self.master)
            .expand(b"seal", &mut k)
            .expect("valid length");
        k
    }

    /// Sealed snapshot: `"HGV1" || version || nonce(12) || AEAD(entries)`.
    pub fn to_sealed_bytes(&self) -> Vec<u8> {
        let entries = self.entries.read().expect("vault lock poisoned");
        let mut handles: Vec<_> = entries.keys().copied().collect();
        handles.sort_by_key(|h| h.0);
        let mut plain = Writer::with_capacity(4 + handles.len() * 80);
        plain.u32(handles.len() as u32);
        for h in &handles {
            let e = &entries[h];
            plain.raw(&h.0).raw(&e.signing.to_bytes()).raw(&e.secret);
        }
        let mut nonce = [0u8; 12];
        OsRng.fill_bytes(&mut nonce);
        let aad = [&VAULT_MAGIC[..], &[VAULT_VERSION]].concat();
        let ct = ChaCha20Poly1305::new(&self.seal_key().into())
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plain.as_slice(),
                    aad: &aad,
                },
            )
            .expect("in-memory encryption cannot fail");
        let mut out = aad;
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn from_sealed_bytes(master: [u8; 32], bytes: &[u8]) -> Result<Self, PkiError> {
        let vault = KeyVault::new(master);
        let bad = |m: &str| PkiError::VaultStorage(m.to_owned());
        if bytes.len() < 5 + 12 + 16 || &bytes[..4] != VAULT_MAGIC {
            return Err(bad("not a vault file"));
        }
        if bytes[4] != VAULT_VERSION {
            return Err(bad("unsupported vault version"));
        }
        let plain = ChaCha20Poly1305::new(&vault.seal_key().into())
            .decrypt(
                Nonce::from_slice(&bytes[5..17]),
                Payload {
                    msg: &bytes[17..],
                    aad: &bytes[..5],
                },
            )
            .map_err(|_| bad("vault unseal failed"))?;
        let mut r = Reader::new(&plain);
        let n = r.u32()?;
        {
            let mut entries = vault.entries.write().expect("vault lock poisoned");
            for _ in 0..n {
                let handle = VaultHandle(r.array()?);
                let seed: [u8; 32] = r.array()?;
                let secret: [u8; 32] = r.array()?;
                entries.insert(
                    handle,
                    VaultEntry {
                        signing: SigningKey::from_bytes(&seed),
                        secret,
                    },
                );
            }
        }
        r.finish()?;
        Ok(vault)
    }

    pub fn save(&self, path: &Path) -> Result<(), PkiError> {
        crate::fsutil::write_atomic(path, &self.to_sealed_bytes())
            .map_err(|e| PkiError::VaultStorage(e.to_string()))
    }

    pub fn load(master: [u8; 32], path: &Path) -> Result<Self, PkiError> {
        let bytes = std::fs::read(path).map_err(|e| PkiError::VaultStorage(e.to_string()))?;
        Self::from_sealed_bytes(master, &bytes)
    }
}

#[derive(Debug, Clone)]
pub struct GatewayIdentity {
    pub root_cert: Certificate,
    pub vault_handle: VaultHandle,
}

/// Derives the root key material deterministically from a seed.
fn seeded_material(seed: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let hk = Hkdf::<Sha256>::new(Some(b"HGV1-seeded"), seed);
    let mut signing = [0u8; 32];
    let mut secret = [0u8; 32];
    hk.expand(b"root-signing", &mut signing).expect("valid length");
    hk.expand(b"root-secret", &mut secret).expect("valid length");
    (signing, secret)
}

/// Creates the self-signed gateway root with a ten-year validity window.
///
/// With a seed, key material is derived from it and the serial is counter
/// value 1, so the certificate bytes are reproducible.
pub fn generate_root_identity(
    vault: &KeyVault,
    now_secs: u64,
    seed: Option<[u8; 32]>,
) -> Result<GatewayIdentity, PkiError> {
    let (handle, serial) = match seed {
        Some(seed) => {
            let (signing, secret) = seeded_material(&seed);
            (vault.insert(signing, secret), Serial::from_counter(1))
        }
        None => {
            let mut s = [0u8; 16];
            OsRng.fill_bytes(&mut s);
            (vault.generate(), Serial(s))
        }
    };
    let mut cert = Certificate {
        serial,
        subject: ROOT_SUBJECT.to_owned(),
        issuer: ROOT_SUBJECT.to_owned(),
        role: Role::Root,
        not_before: now_secs,
        not_after: now_secs + ROOT_VALIDITY_DAYS * SECS_PER_DAY,
        public_key: vault.public_key(&handle)?,
        signature: [0; 64],
    };
    cert.signature = vault.sign(&handle, &cert.signed_bytes())?;
    Ok(GatewayIdentity {
        root_cert: cert,
        vault_handle: handle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "next", rename_all = "snake_case")]
pub enum SerialSource {
    Random,
    /// Next counter value to hand out.
    Counter(u128),
}

impl SerialSource {
    fn next(&mut self) -> Serial {
        match self {
            SerialSource::Random => {
                let mut s = [0u8; 16];
                OsRng.fill_bytes(&mut s);
                Serial(s)
            }
            SerialSource::Counter(n) => {
                let s = Serial::from_counter(*n);
                *n += 1;
                s
            }
        }
    }
}

/// Issues certificates under the gateway root, signing through the vault.
#[derive(Debug)]
pub struct CertificateAuthority {
    identity: GatewayIdentity,
    serials: Mutex<SerialSource>,
}

impl CertificateAuthority {
    pub fn new(identity: GatewayIdentity, serials: SerialSource) -> Result<Self, PkiError> {
        if identity.root_cert.role != Role::Root {
            return Err(PkiError::NotRoot);
        }
        Ok(Self {
            identity,
            serials: Mutex::new(serials),
        })
    }

    pub fn identity(&self) -> &GatewayIdentity {
        &self.identity
    }

    pub fn root(&self) -> &Certificate {
        &self.identity.root_cert
    }

    pub fn serial_source(&self) -> SerialSource {
        *self.serials.lock().expect("serial lock poisoned")
    }

    pub fn issue(
        &self,
        vault: &KeyVault,
        csr: &CertSigningRequest,
        validity_days: u32,
        now_secs: u64,
    ) -> Result<Certificate, PkiError> {
        csr.validate()?;
        if validity_days == 0 {
            return Err(PkiError::InvalidValidity);
        }
        let serial = self.serials.lock().expect("serial lock poisoned").next();
        let mut cert = Certificate {
            serial,
            subject: csr.subject.clone(),
            issuer: self.identity.root_cert.subject.clone(),
            role: csr.role,
            not_before: now_secs,
            not_after: now_secs + u64::from(validity_days) * SECS_PER_DAY,
            public_key: csr.public_key,
            signature: [0; 64],
        };
        cert.signature = vault.sign(&self.identity.vault_handle, &cert.signed_bytes())?;
        Ok(cert)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationEntry {
    pub serial: Serial,
    pub revoked_at: u64,
    pub reason: String,
}

/// Append-only revocation set.
#[derive(Debug, Default)]
pub struct RevocationList {
    inner: RwLock<(Vec<RevocationEntry>, HashSet<Serial>)>,
}

impl RevocationList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<RevocationEntry>) -> Self {
        let list = Self::new();
        for e in entries {
            list.revoke(e.serial, e.revoked_at, &e.reason);
        }
        list
    }

    /// Returns `false` if the serial was already revoked (no new entry).
    pub fn revoke(&self, serial: Serial, revoked_at: u64, reason: &str) -> bool {
        let mut g = self.inner.write().expect("revocation lock poisoned");
        if !g.1.insert(serial) {
            return false;
        }
        g.0.push(RevocationEntry {
            serial,
            revoked_at,
            reason: reason.to_owned(),
        });
        true
    }

    pub fn is_revoked(&self, serial: &Serial) -> bool {
        self.inner
            .read()
            .expect("revocation lock poisoned")
            .1
            .contains(serial)
    }

    pub fn entries(&self) -> Vec<RevocationEntry> {
        self.inner.read().expect("revocation lock poisoned").0.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("revocation lock poisoned").0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyOutcome {
    Valid,
    Expired,
    NotYetValid,
    BadSignature,
    Revoked,
    UnknownIssuer,
}

/// Total check of `cert` against the root. First failure wins, in the order
/// issuer, signature, validity window, revocation.
pub fn verify_chain(
    cert: &Certificate,
    root: &Certificate,
    revocations: &RevocationList,
    now_secs: u64,
) -> VerifyOutcome {
    if root.role != Role::Root || cert.issuer != root.subject {
        return VerifyOutcome::UnknownIssuer;
    }
    if !verify_signature(&root.public_key, &cert.signed_bytes(), &cert.signature) {
        return VerifyOutcome::BadSignature;
    }
    if now_secs < cert.not_before {
        return VerifyOutcome::NotYetValid;
    }
    if now_secs >= cert.not_after {
        return VerifyOutcome::Expired;
    }
    if revocations.is_revoked(&cert.serial) {
        return VerifyOutcome::Revoked;
    }
    VerifyOutcome::Valid
}
