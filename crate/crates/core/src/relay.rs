//! Telemetry wire protocol, keyless repeater, and the gateway ingest pipeline.
//!
//! Envelope layout (big-endian):
//!
//! ```text
//!  0..4   magic "HGT1"
//!  4      version 0x01
//!  5      hop_count        (not authenticated; repeaters increment it)
//!  6..14  device_id
//! 14..22  seq              (u64, starts at 1, strictly increasing)
//! 22..34  nonce            (epoch u32 || seq u64)
//! 34..    ciphertext || tag(16)
//! ```
//!
//! The AEAD associated data is bytes `0..22` with the hop byte zeroed.

use std::net::SocketAddr;
use std::num::NonZeroUsize;

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::enrollment::{DeviceStatus, Registry};
use crate::ids::{Alert, EventKind, SecurityEvent, Sentinel};
use crate::store::{ReadingStore, StoredReading};
use crate::DeviceId;

pub const TELEMETRY_MAGIC: &[u8; 4] = b"HGT1";
pub const ENROLL_MAGIC: &[u8; 4] = b"HGE1";
pub const VERSION: u8 = 0x01;
pub const HOP_OFFSET: usize = 5;
pub const HEADER_LEN: usize = 22;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const MAX_PLAINTEXT: usize = 1024;
pub const MIN_DATAGRAM: usize = HEADER_LEN + NONCE_LEN + TAG_LEN;
pub const MAX_DATAGRAM: usize = MIN_DATAGRAM + MAX_PLAINTEXT;
pub const MAX_METRIC_LEN: usize = 64;
pub const DEFAULT_UDP_PORT: u16 = 5683;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("plaintext exceeds {MAX_PLAINTEXT} bytes")]
    PayloadTooLarge,
    #[error("sequence numbers start at 1")]
    InvalidSeq,
    #[error("invalid reading: {0}")]
    InvalidReading(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version")]
    BadVersion,
    #[error("unknown device")]
    UnknownDevice,
    #[error("authentication failed")]
    AuthFailure,
    #[error("malformed body")]
    MalformedBody,
}

/// One telemetry sample, the plaintext carried inside an envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub metric: String,
    pub value: f64,
    pub timestamp_ms: u64,
}

impl Reading {
    pub fn new(metric: impl Into<String>, value: f64, timestamp_ms: u64) -> Self {
        Self {
            metric: metric.into(),
            value,
            timestamp_ms,
        }
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.metric.is_empty() {
            return Err(EnvelopeError::InvalidReading("empty metric"));
        }
        if self.metric.len() > MAX_METRIC_LEN {
            return Err(EnvelopeError::InvalidReading("metric too long"));
        }
        if !self.value.is_finite() {
            return Err(EnvelopeError::InvalidReading("non-finite value"));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, EnvelopeError> {
        self.validate()?;
        let mut w = Writer::with_capacity(17 + self.metric.len());
        w.u8(self.metric.len() as u8)
            .raw(self.metric.as_bytes())
            .f64(self.value)
            .u64(self.timestamp_ms);
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let len = r.u8()? as usize;
        if len == 0 || len > MAX_METRIC_LEN {
            return Err(CodecError::InvalidValue {
                field: "metric length",
                value: len as u64,
            });
        }
        let metric = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CodecError::InvalidUtf8("metric"))?
            .to_owned();
        let value = r.f64()?;
        if !value.is_finite() {
            return Err(CodecError::InvalidValue {
                field: "value",
                value: value.to_bits(),
            });
        }
        let timestamp_ms = r.u64()?;
        r.finish()?;
        Ok(Reading {
            metric,
            value,
            timestamp_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvelopeHeader {
    pub hop_count: u8,
    pub device_id: DeviceId,
    pub seq: u64,
}

pub fn nonce_for(epoch: u32, seq: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&epoch.to_be_bytes());
    n[4..].copy_from_slice(&seq.to_be_bytes());
    n
}

fn associated_data(datagram: &[u8]) -> [u8; HEADER_LEN] {
    let mut aad = [0u8; HEADER_LEN];
    aad.copy_from_slice(&datagram[..HEADER_LEN]);
    aad[HOP_OFFSET] = 0;
    aad
}

/// Framing checks only; nothing here is authenticated.
pub fn peek_header(datagram: &[u8]) -> Result<EnvelopeHeader, DecodeError> {
    if datagram.len() < 4 || &datagram[..4] != TELEMETRY_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if datagram.len() < 5 {
        return Err(DecodeError::MalformedBody);
    }
    if datagram[4] != VERSION {
        return Err(DecodeError::BadVersion);
    }
    if datagram.len() < MIN_DATAGRAM || datagram.len() > MAX_DATAGRAM {
        return Err(DecodeError::MalformedBody);
    }
    Ok(EnvelopeHeader {
        hop_count: datagram[HOP_OFFSET],
        device_id: DeviceId(datagram[6..14].try_into().expect("checked length")),
        seq: u64::from_be_bytes(datagram[14..22].try_into().expect("checked length")),
    })
}

/// Seals arbitrary plaintext into an envelope with `hop_count = 0`.
pub fn seal_envelope(
    plaintext: &[u8],
    key: &[u8; 32],
    device_id: DeviceId,
    seq: u64,
    epoch: u32,
) -> Result<Vec<u8>, EnvelopeError> {
    if plaintext.len() > MAX_PLAINTEXT {
        return Err(EnvelopeError::PayloadTooLarge);
    }
    if seq == 0 {
        return Err(EnvelopeError::InvalidSeq);
    }
    let nonce = nonce_for(epoch, seq);
    let mut out = Vec::with_capacity(MIN_DATAGRAM + plaintext.len());
    out.extend_from_slice(TELEMETRY_MAGIC);
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&device_id.0);
    out.extend_from_slice(&seq.to_be_bytes());
    let aad = associated_data(&out);
    out.extend_from_slice(&nonce);
    let ct = ChaCha20Poly1305::new(key.into())
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .expect("in-memory encryption cannot fail");
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn encode_envelope(
    reading: &Reading,
    key: &[u8; 32],
    device_id: DeviceId,
    seq: u64,
    epoch: u32,
) -> Result<Vec<u8>, EnvelopeError> {
    seal_envelope(&reading.encode()?, key, device_id, seq, epoch)
}

/// Authenticates and decrypts a datagram whose header already parsed.
pub fn open_envelope(
    datagram: &[u8],
    key: &[u8; 32],
    epoch: u32,
) -> Result<(EnvelopeHeader, Vec<u8>), DecodeError> {
    let header = peek_header(datagram)?;
    let nonce = nonce_for(epoch, header.seq);
    // The nonce bytes are not covered by the associated data, so they must
    // match the value implied by (epoch, seq) exactly.
    if datagram[HEADER_LEN..HEADER_LEN + NONCE_LEN] != nonce {
        return Err(DecodeError::AuthFailure);
    }
    let aad = associated_data(datagram);
    let plain = ChaCha20Poly1305::new(key.into())
        .decrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &datagram[HEADER_LEN + NONCE_LEN..],
                aad: &aad,
            },
        )
        .map_err(|_| DecodeError::AuthFailure)?;
    Ok((header, plain))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedEnvelope {
    pub device_id: DeviceId,
    pub seq: u64,
    pub hop_count: u8,
    pub reading: Reading,
}

pub fn decode_envelope<F>(datagram: &[u8], key_lookup: F) -> Result<DecodedEnvelope, DecodeError>
where
    F: FnOnce(&DeviceId) -> Option<([u8; 32], u32)>,
{
    let header = peek_header(datagram)?;
    let (key, epoch) = key_lookup(&header.device_id).ok_or(DecodeError::UnknownDevice)?;
    let (header, plain) = open_envelope(datagram, &key, epoch)?;
    let reading = Reading::decode(&plain).map_err(|_| DecodeError::MalformedBody)?;
    Ok(DecodedEnvelope {
        device_id: header.device_id,
        seq: header.seq,
        hop_count: header.hop_count,
        reading,
    })
}

pub const DEFAULT_MAX_HOPS: u8 = 2;
pub const REPEATER_CACHE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardDecision {
    Forward(Vec<u8>),
    DropDuplicate,
    DropHops,
    DropMalformed,
}

/// State of one keyless repeater.
#[derive(Debug)]
pub struct RepeaterState {
    seen: LruCache<(DeviceId, u64), ()>,
    pub max_hops: u8,
    pub forwarded_count: u64,
    pub dropped_dup_count: u64,
    pub dropped_hops_count: u64,
    pub dropped_malformed_count: u64,
}

impl Default for RepeaterState {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_HOPS, REPEATER_CACHE)
    }
}

impl RepeaterState {
    pub fn new(max_hops: u8, capacity: usize) -> Self {
        Self {
            seen: LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("nonzero")),
            max_hops,
            forwarded_count: 0,
            dropped_dup_count: 0,
            dropped_hops_count: 0,
            dropped_malformed_count: 0,
        }
    }

    pub fn cached(&self) -> usize {
        self.seen.len()
    }
}

/// Relays a datagram one hop closer to the gateway.
///
/// Telemetry is deduplicated on `(device_id, seq)`; enrollment datagrams share
/// the hop byte but carry no sequence number, so they are only hop-limited.
pub fn repeater_forward(datagram: &[u8], state: &mut RepeaterState, _now_ms: u64) -> ForwardDecision {
    let key = if datagram.len() >= 4 && &datagram[..4] == ENROLL_MAGIC {
        if datagram.len() < crate::enrollment::ENROLL_HEADER_LEN || datagram[4] != VERSION {
            state.dropped_malformed_count += 1;
            return ForwardDecision::DropMalformed;
        }
        None
    } else {
        match peek_header(datagram) {
            Ok(h) => Some((h.device_id, h.seq)),
            Err(_) => {
                state.dropped_malformed_count += 1;
                return ForwardDecision::DropMalformed;
            }
        }
    };
    if datagram[HOP_OFFSET] >= state.max_hops {
        state.dropped_hops_count += 1;
        return ForwardDecision::DropHops;
    }
    if let Some(k) = key {
        if state.seen.get(&k).is_some() {
            state.dropped_dup_count += 1;
            return ForwardDecision::DropDuplicate;
        }
        state.seen.put(k, ());
    }
    let mut out = datagram.to_vec();
    out[HOP_OFFSET] += 1;
    state.forwarded_count += 1;
    ForwardDecision::Forward(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    Stored,
    RejectedReplay,
    RejectedUnknown,
    RejectedAuth,
    RejectedQuarantined,
    RejectedRevoked,
    /// Framing failed before a device could be identified.
    RejectedMalformed,
    /// Authenticated, but the readings table could not persist it. The
    /// sequence number is not consumed, so a retransmission can still land.
    FailedStorage,
}

#[derive(Debug, Clone)]
pub struct IngestResult {
    pub outcome: IngestOutcome,
    pub device_id: Option<DeviceId>,
    pub alerts: Vec<Alert>,
}

/// Runs one telemetry datagram through the gateway pipeline:
/// parse, device lookup, status gate, replay gate, decrypt, store.
///
/// Every rejection feeds the IDS a typed event; a stored reading feeds it a
/// clean one. `last_seq` only moves after successful authentication.
pub fn ingest(
    datagram: &[u8],
    source: SocketAddr,
    registry: &mut Registry,
    ids: &mut Sentinel,
    store: &mut ReadingStore,
    now_ms: u64,
) -> IngestResult {
    let header = match peek_header(datagram) {
        Ok(h) => h,
        Err(_) => {
            return IngestResult {
                outcome: IngestOutcome::RejectedMalformed,
                device_id: None,
                alerts: Vec::new(),
            }
        }
    };
    let id = header.device_id;
    let event = |kind| SecurityEvent {
        kind,
        device_id: Some(id),
        source,
        at: now_ms,
    };
    let reject = |outcome, kind, ids: &mut Sentinel| IngestResult {
        outcome,
        device_id: Some(id),
        alerts: ids.evaluate(&event(kind)),
    };

    let Some(device) = registry.get(&id) else {
        return reject(IngestOutcome::RejectedUnknown, EventKind::UnknownDevice, ids);
    };
    match device.status {
        DeviceStatus::Revoked => {
            return reject(IngestOutcome::RejectedRevoked, EventKind::RevokedTraffic, ids)
        }
        DeviceStatus::Quarantined => {
            return reject(
                IngestOutcome::RejectedQuarantined,
                EventKind::QuarantinedTraffic,
                ids,
            )
        }
        DeviceStatus::Active => {}
    }
    if header.seq <= device.last_seq {
        return reject(IngestOutcome::RejectedReplay, EventKind::Replay, ids);
    }
    let key = device.telemetry_key;
    let epoch = device.telemetry_key_epoch;
    let reading = match open_envelope(datagram, &key, epoch)
        .and_then(|(_, plain)| Reading::decode(&plain).map_err(|_| DecodeError::MalformedBody))
    {
        Ok(r) => r,
        Err(_) => return reject(IngestOutcome::RejectedAuth, EventKind::AuthFailure, ids),
    };

    let stored = store.insert(StoredReading {
        device_id: id,
        seq: header.seq,
        metric: reading.metric,
        value: reading.value,
        device_ts: reading.timestamp_ms,
        arrival_ts: now_ms,
    });
    if stored.is_err() {
        return IngestResult {
            outcome: IngestOutcome::FailedStorage,
            device_id: Some(id),
            alerts: Vec::new(),
        };
    }
    registry.record_seq(&id, header.seq, now_ms);
    IngestResult {
        outcome: IngestOutcome::Stored,
        device_id: Some(id),
        alerts: ids.evaluate(&event(EventKind::Clean)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from tests/vectors/gen_vectors.py (pyca/cryptography ChaCha20-Poly1305).
    const GOLDEN: &str = "48475431010000000000000000010000000000000001000000000000000000000001\
                          294147e3d3d30ee0371c1e6025ff4c91b79426e953176c448e750adf0f61e5b3f368";

    fn golden_reading() -> Reading {
        Reading::new("t", 0.0, 0)
    }

    fn any_device(_: &DeviceId) -> Option<([u8; 32], u32)> {
        Some(([0u8; 32], 0))
    }

    #[test]
    fn golden_vector_encodes_and_decodes() {
        let env = encode_envelope(&golden_reading(), &[0; 32], DeviceId::from_u64(1), 1, 0).unwrap();
        assert_eq!(hex::encode(&env), GOLDEN);
        let d = decode_envelope(&env, any_device).unwrap();
        assert_eq!(d.reading, golden_reading());
        assert_eq!((d.device_id, d.seq), (DeviceId::from_u64(1), 1));
    }

    #[test]
    fn plaintext_boundary() {
        let id = DeviceId::from_u64(1);
        let max = seal_envelope(&[0u8; 1024], &[0; 32], id, 1, 0).unwrap();
        assert_eq!(max.len(), MAX_DATAGRAM);
        assert_eq!(
            seal_envelope(&[0u8; 1025], &[0; 32], id, 1, 0),
            Err(EnvelopeError::PayloadTooLarge)
        );
        assert_eq!(
            seal_envelope(b"x", &[0; 32], id, 0, 0),
            Err(EnvelopeError::InvalidSeq)
        );
    }

    #[test]
    fn reading_validation() {
        assert!(Reading::new("", 1.0, 0).encode().is_err());
        assert!(Reading::new("x".repeat(65), 1.0, 0).encode().is_err());
        assert!(Reading::new("x".repeat(64), 1.0, 0).encode().is_ok());
        assert!(Reading::new("t", f64::NAN, 0).encode().is_err());
        assert!(Reading::new("t", f64::INFINITY, 0).encode().is_err());
        // NaN smuggled past the encoder is still rejected at decode
        let mut raw = Reading::new("t", 1.0, 0).encode().unwrap();
        raw[2..10].copy_from_slice(&f64::NAN.to_be_bytes());
        assert!(Reading::decode(&raw).is_err());
    }

    #[test]
    fn hop_byte_is_not_authenticated() {
        let mut env = hex::decode(GOLDEN).unwrap();
        env[HOP_OFFSET] = 1;
        let d = decode_envelope(&env, any_device).unwrap();
        assert_eq!(d.hop_count, 1);
    }

    #[test]
    fn framing_errors() {
        let env = hex::decode(GOLDEN).unwrap();
        assert_eq!(decode_envelope(&env[..20], any_device), Err(DecodeError::MalformedBody));
        assert_eq!(decode_envelope(&env[..2], any_device), Err(DecodeError::BadMagic));
        assert_eq!(decode_envelope(&[], any_device), Err(DecodeError::BadMagic));
        let mut v2 = env.clone();
        v2[4] = 2;
        assert_eq!(decode_envelope(&v2, any_device), Err(DecodeError::BadVersion));
        assert_eq!(decode_envelope(&env, |_| None), Err(DecodeError::UnknownDevice));
        let wrong_key = |_: &DeviceId| Some(([1u8; 32], 0));
        assert_eq!(decode_envelope(&env, wrong_key), Err(DecodeError::AuthFailure));
        let wrong_epoch = |_: &DeviceId| Some(([0u8; 32], 1));
        assert_eq!(decode_envelope(&env, wrong_epoch), Err(DecodeError::AuthFailure));
    }

    #[test]
    fn non_reading_plaintext_is_malformed() {
        let env = seal_envelope(b"garbage", &[0; 32], DeviceId::from_u64(1), 1, 0).unwrap();
        assert_eq!(decode_envelope(&env, any_device), Err(DecodeError::MalformedBody));
    }

    #[test]
    fn repeater_forwards_dedups_and_limits_hops() {
        let env = hex::decode(GOLDEN).unwrap();
        let mut st = RepeaterState::default();
        let ForwardDecision::Forward(out) = repeater_forward(&env, &mut st, 0) else {
            panic!("expected forward");
        };
        let diff: Vec<usize> = (0..env.len()).filter(|&i| env[i] != out[i]).collect();
        assert_eq!(diff, vec![HOP_OFFSET]);
        assert_eq!(out[HOP_OFFSET], 1);
        assert_eq!(repeater_forward(&env, &mut st, 0), ForwardDecision::DropDuplicate);

        let mut st = RepeaterState::default();
        let mut two = env.clone();
        two[HOP_OFFSET] = 2;
        assert_eq!(repeater_forward(&two, &mut st, 0), ForwardDecision::DropHops);
        assert_eq!(st.cached(), 0);
        two[HOP_OFFSET] = 1;
        assert!(matches!(repeater_forward(&two, &mut st, 0), ForwardDecision::Forward(_)));

        assert_eq!(repeater_forward(&env[..10], &mut st, 0), ForwardDecision::DropMalformed);
        assert_eq!(
            (st.forwarded_count, st.dropped_hops_count, st.dropped_malformed_count),
            (1, 1, 1)
        );
    }

    #[test]
    fn repeater_cache_evicts_least_recently_seen() {
        let mut st = RepeaterState::new(2, 2);
        let id = DeviceId::from_u64(3);
        let e = |seq| seal_envelope(b"x", &[0; 32], id, seq, 0).unwrap();
        for seq in 1..=3 {
            assert!(matches!(repeater_forward(&e(seq), &mut st, 0), ForwardDecision::Forward(_)));
        }
        // seq 1 was evicted by seq 3
        assert!(matches!(repeater_forward(&e(1), &mut st, 0), ForwardDecision::Forward(_)));
        assert_eq!(repeater_forward(&e(3), &mut st, 0), ForwardDecision::DropDuplicate);
    }
}
