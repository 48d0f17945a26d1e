//! Encrypted export bundles for untrusted sinks.
//!
//! ```text
//! header  "HGB1" | ver | from u64 | to u64 | created_at u64 | count u32
//!         | u16 device count | device ids
//! key     sealed box of the 32-byte bundle key to the recipient (aad = header)
//! payload u32 length | ChaCha20-Poly1305(bundle key, nonce 0, readings, aad = header)
//! ```
//!
//! The bundle key is single-use, so the fixed nonce is safe.

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use sha2::{Digest, Sha256};

use super::readings::StoredReading;
use super::StoreError;
use crate::codec::{CodecError, Reader, Writer};
use crate::seal::{self, SealError, SEAL_OVERHEAD};
use crate::DeviceId;

pub const BUNDLE_MAGIC: &[u8; 4] = b"HGB1";
pub const BUNDLE_VERSION: u8 = 1;
pub const BUNDLE_LABEL: &[u8] = b"HGB1-bundle";
const WRAPPED_KEY_LEN: usize = 32 + SEAL_OVERHEAD;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleHeader {
    pub from: u64,
    pub to: u64,
    pub created_at: u64,
    pub count: u32,
    pub devices: Vec<DeviceId>,
}

impl BundleHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(BUNDLE_MAGIC)
            .u8(BUNDLE_VERSION)
            .u64(self.from)
            .u64(self.to)
            .u64(self.created_at)
            .u32(self.count)
            .u16(self.devices.len() as u16);
        for d in &self.devices {
            w.raw(&d.0);
        }
        w.finish()
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, BundleError> {
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(BundleError::BadMagic);
        }
        if r.u8()? != BUNDLE_VERSION {
            return Err(BundleError::BadVersion);
        }
        let from = r.u64()?;
        let to = r.u64()?;
        let created_at = r.u64()?;
        let count = r.u32()?;
        let n = r.u16()?;
        let devices = (0..n)
            .map(|_| r.array().map(DeviceId))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            from,
            to,
            created_at,
            count,
            devices,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BundleError {
    #[error("not an export bundle")]
    BadMagic,
    #[error("unsupported bundle version")]
    BadVersion,
    #[error("malformed bundle: {0}")]
    Codec(#[from] CodecError),
    #[error("authentication failed")]
    AuthFailure,
    #[error("record count does not match header")]
    CountMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBundle {
    pub header: BundleHeader,
    pub bytes: Vec<u8>,
}

impl EncryptedBundle {
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(&self.bytes).into()
    }
}

/// Encrypts `readings` to `recipient` (an X25519 public key). Devices are
/// listed in first-appearance order.
pub fn seal_bundle(
    readings: &[&StoredReading],
    from: u64,
    to: u64,
    created_at: u64,
    recipient: &[u8; 32],
    ephemeral_secret: &[u8; 32],
    bundle_key: &[u8; 32],
) -> Result<EncryptedBundle, StoreError> {
    let mut devices: Vec<DeviceId> = Vec::new();
    for r in readings {
        if !devices.contains(&r.device_id) {
            devices.push(r.device_id);
        }
    }
    if devices.len() > u16::MAX as usize || readings.len() > u32::MAX as usize {
        return Err(StoreError::BadRange);
    }
    let header = BundleHeader {
        from,
        to,
        created_at,
        count: readings.len() as u32,
        devices,
    };
    let aad = header.encode();
    let wrapped = seal::seal(BUNDLE_LABEL, recipient, ephemeral_secret, bundle_key, &aad)
        .map_err(|e| match e {
            SealError::WeakKey => StoreError::BadRecipient,
            other => StoreError::StorageFailure(other.to_string()),
        })?;
    let mut plain = Writer::new();
    for r in readings {
        r.encode_into(&mut plain);
    }
    let ct = ChaCha20Poly1305::new(bundle_key.into())
        .encrypt(
            &Nonce::default(),
            Payload {
                msg: plain.as_slice(),
                aad: &aad,
            },
        )
        .expect("in-memory encryption cannot fail");
    let mut bytes = aad.clone();
    bytes.extend_from_slice(&wrapped);
    bytes.extend_from_slice(&(ct.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&ct);
    Ok(EncryptedBundle { header, bytes })
}

/// Recipient side: unwraps the bundle key and decrypts the readings.
pub fn open_bundle(
    bytes: &[u8],
    recipient_secret: &[u8; 32],
) -> Result<(BundleHeader, Vec<StoredReading>), BundleError> {
    let mut r = Reader::new(bytes);
    let header = BundleHeader::read(&mut r)?;
    let aad = &bytes[..r.position()];
    let wrapped = r.take(WRAPPED_KEY_LEN)?;
    let ct_len = r.u32()? as usize;
    let ct = r.take(ct_len)?;
    r.finish()?;
    let key: [u8; 32] = seal::open(BUNDLE_LABEL, recipient_secret, wrapped, aad)
        .map_err(|_| BundleError::AuthFailure)?
        .try_into()
        .map_err(|_| BundleError::AuthFailure)?;
    let plain = ChaCha20Poly1305::new(&key.into())
        .decrypt(&Nonce::default(), Payload { msg: ct, aad })
        .map_err(|_| BundleError::AuthFailure)?;
    let mut pr = Reader::new(&plain);
    let mut out = Vec::with_capacity(header.count as usize);
    while pr.remaining() > 0 {
        out.push(StoredReading::read(&mut pr)?);
    }
    if out.len() != header.count as usize {
        return Err(BundleError::CountMismatch);
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seal::x25519_public;

    fn sample() -> Vec<StoredReading> {
        (0..5)
            .map(|i| StoredReading {
                device_id: DeviceId::from_u64(i % 2 + 1),
                seq: i,
                metric: "temp_c".into(),
                value: i as f64 * 0.5,
                device_ts: 1000 + i,
                arrival_ts: 2000 + i,
            })
            .collect()
    }

    #[test]
    fn round_trip_and_wrong_key() {
        let rows = sample();
        let refs: Vec<_> = rows.iter().collect();
        let secret = [5u8; 32];
        let b = seal_bundle(&refs, 0, 9999, 7, &x25519_public(&secret), &[6; 32], &[8; 32]).unwrap();
        let (h, out) = open_bundle(&b.bytes, &secret).unwrap();
        assert_eq!(h, b.header);
        assert_eq!(h.devices, vec![DeviceId::from_u64(1), DeviceId::from_u64(2)]);
        assert_eq!(out, rows);
        assert_eq!(open_bundle(&b.bytes, &[4u8; 32]), Err(BundleError::AuthFailure));
    }

    #[test]
    fn empty_bundle_is_valid() {
        let secret = [5u8; 32];
        let b = seal_bundle(&[], 10, 20, 7, &x25519_public(&secret), &[6; 32], &[8; 32]).unwrap();
        let (h, out) = open_bundle(&b.bytes, &secret).unwrap();
        assert_eq!((h.count, out.len()), (0, 0));
    }

    #[test]
    fn low_order_recipient_rejected() {
        let err = seal_bundle(&[], 0, 1, 0, &[0u8; 32], &[6; 32], &[8; 32]).unwrap_err();
        assert!(matches!(err, StoreError::BadRecipient));
    }
}
