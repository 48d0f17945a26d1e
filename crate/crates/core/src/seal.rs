//! Sealed boxes: ephemeral X25519 agreement, HKDF-SHA256, ChaCha20-Poly1305.
//!
//! Layout: `ephemeral_public (32) || ciphertext || tag (16)`. The derived key
//! is single-use, so the AEAD nonce is fixed at zero.

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use curve25519_dalek::montgomery::MontgomeryPoint;
use hkdf::Hkdf;
use sha2::Sha256;
use thiserror::Error;

pub const SEAL_OVERHEAD: usize = 32 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SealError {
    #[error("recipient key is a low-order point")]
    WeakKey,
    #[error("sealed box too short")]
    Truncated,
    #[error("authentication failed")]
    AuthFailure,
}

pub fn x25519_public(secret: &[u8; 32]) -> [u8; 32] {
    MontgomeryPoint::mul_base_clamped(*secret).to_bytes()
}

fn derive_key(
    label: &[u8],
    secret: &[u8; 32],
    peer: &[u8; 32],
    eph_pub: &[u8; 32],
    recipient: &[u8; 32],
) -> Result<[u8; 32], SealError> {
    let shared = MontgomeryPoint(*peer).mul_clamped(*secret).to_bytes();
    if shared == [0u8; 32] {
        return Err(SealError::WeakKey);
    }
    let mut info = [0u8; 64];
    info[..32].copy_from_slice(eph_pub);
    info[32..].copy_from_slice(recipient);
    let mut key = [0u8; 32];
    Hkdf::<Sha256>::new(Some(label), &shared)
        .expand(&info, &mut key)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    Ok(key)
}

pub fn seal(
    label: &[u8],
    recipient: &[u8; 32],
    ephemeral_secret: &[u8; 32],
    plaintext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, SealError> {
    let eph_pub = x25519_public(ephemeral_secret);
    let key = derive_key(label, ephemeral_secret, recipient, &eph_pub, recipient)?;
    let ct = ChaCha20Poly1305::new(&key.into())
        .encrypt(&Nonce::default(), Payload { msg: plaintext, aad })
        .expect("in-memory encryption cannot fail");
    let mut out = Vec::with_capacity(32 + ct.len());
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn open(
    label: &[u8],
    recipient_secret: &[u8; 32],
    sealed: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, SealError> {
    if sealed.len() < SEAL_OVERHEAD {
        return Err(SealError::Truncated);
    }
    let eph_pub: [u8; 32] = sealed[..32].try_into().expect("checked length");
    let recipient = x25519_public(recipient_secret);
    let key = derive_key(label, recipient_secret, &eph_pub, &eph_pub, &recipient)?;
    ChaCha20Poly1305::new(&key.into())
        .decrypt(
            &Nonce::default(),
            Payload {
                msg: &sealed[32..],
                aad,
            },
        )
        .map_err(|_| SealError::AuthFailure)
}
