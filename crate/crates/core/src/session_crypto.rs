//! Per-session cryptography: ephemeral keypair, hybrid payload encryption,
//! line-of-sight key delivery, and the volatile key lifecycle.
//!
//! Each session uses a fresh X25519 keypair generated by the backend. The
//! payload travels the broadcast channel encrypted under the session public
//! key (ephemeral ECDH + HKDF-SHA256 into AES-256-GCM, with an HMAC-SHA256
//! over the canonical body). The private key travels only as an
//! [`OpticalKeyFrame`] over the optical link, is held in a
//! [`VolatileKeyCell`] in volatile memory, and is zeroized before the
//! decrypting call returns.
//!
//! None of the private-key-bearing types here implement any serialization
//! codec; there is no path from them to persistent storage or to a network
//! frame.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::{Zeroize, Zeroizing};

use crate::time::{SimDuration, SimTime};

/// Classical security level of the session curve class. X25519 and P-256
/// sit at ~128 bits against classical attack; reporting 256 here would be
/// an overclaim.
pub const CLASSICAL_SECURITY_BITS: u32 = 128;

/// AES-256-GCM nonce length.
pub const NONCE_LEN: usize = 12;

/// HMAC-SHA256 output length.
pub const MAC_LEN: usize = 32;

const HKDF_INFO: &[u8] = b"svb1 session payload keys";

type HmacSha256 = Hmac<Sha256>;

/// 16-byte session identifier, unique per backend run.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId([u8; 16]);

impl SessionId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        SessionId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({})", hex::encode(self.0))
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for SessionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let bytes: [u8; 16] = raw
            .try_into()
            .map_err(|_| serde::de::Error::custom("session id must be 16 bytes"))?;
        Ok(SessionId(bytes))
    }
}

/// Ephemeral session keypair, generated fresh per session on the backend.
pub struct SessionKeypair {
    pub session_id: SessionId,
    public: PublicKey,
    secret: StaticSecret,
}

impl SessionKeypair {
    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    /// Split into the delivery material for the companion. Consumes the
    /// keypair: after this call the backend retains no private half.
    pub fn into_key_material(self, ttl: SimDuration) -> SessionKeyMaterial {
        SessionKeyMaterial {
            session_id: self.session_id,
            key: Zeroizing::new(self.secret.to_bytes()),
            ttl,
        }
    }
}

impl fmt::Debug for SessionKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeypair")
            .field("session_id", &self.session_id)
            .field("public", &hex::encode(self.public.as_bytes()))
            .field("secret", &"[redacted]")
            .finish()
    }
}

/// Session private key en route to the companion device, with its expiry
/// window. Exists only in memory; never serialized.
pub struct SessionKeyMaterial {
    pub session_id: SessionId,
    key: Zeroizing<[u8; 32]>,
    pub ttl: SimDuration,
}

impl SessionKeyMaterial {
    /// Stamp the material into an optical frame at presentation time.
    pub fn into_frame(self, issued_at: SimTime) -> OpticalKeyFrame {
        OpticalKeyFrame {
            session_id: self.session_id,
            key: self.key,
            issued_at,
            ttl: self.ttl,
        }
    }

    /// Raw key bytes, exposed for the compromised-companion exfiltration
    /// annotation in analysis scenarios.
    pub fn key_bytes(&self) -> &[u8; 32] {
        &self.key
    }
}

impl fmt::Debug for SessionKeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeyMaterial")
            .field("session_id", &self.session_id)
            .field("key", &"[redacted]")
            .field("ttl", &self.ttl)
            .finish()
    }
}

/// The session private key as a time-bounded optical signal.
///
/// Valid only while `now - issued_at <= ttl`. Carried exclusively by the
/// optical link; no network message type can embed one.
///
/// ```compile_fail
/// fn requires_serialize<T: serde::Serialize>() {}
/// requires_serialize::<sovereign_core::session_crypto::OpticalKeyFrame>();
/// ```
pub struct OpticalKeyFrame {
    pub session_id: SessionId,
    key: Zeroizing<[u8; 32]>,
    pub issued_at: SimTime,
    pub ttl: SimDuration,
}

impl fmt::Debug for OpticalKeyFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpticalKeyFrame")
            .field("session_id", &self.session_id)
            .field("key", &"[redacted]")
            .field("issued_at", &self.issued_at)
            .field("ttl", &self.ttl)
            .finish()
    }
}

/// Volatile holder for a received session private key.
///
/// The key exists in the interval `[created_at, purged_at]` and nowhere
/// else. Purging zeroizes the bytes in place; a purged cell cannot decrypt
/// again. Dropping an unpurged cell also zeroizes.
///
/// ```compile_fail
/// fn requires_serialize<T: serde::Serialize>() {}
/// requires_serialize::<sovereign_core::session_crypto::VolatileKeyCell>();
/// ```
pub struct VolatileKeyCell {
    key_bytes: [u8; 32],
    pub created_at: SimTime,
    pub purged_at: Option<SimTime>,
    pub purge_flag: bool,
}

impl VolatileKeyCell {
    pub fn is_purged(&self) -> bool {
        self.purge_flag
    }

    fn purge(&mut self, now: SimTime) {
        self.key_bytes.zeroize();
        self.purged_at = Some(now);
        self.purge_flag = true;
    }

    /// Post-purge audit hook: all key bytes must read zero.
    pub fn bytes_are_zeroized(&self) -> bool {
        self.key_bytes.iter().all(|&b| b == 0)
    }
}

impl Drop for VolatileKeyCell {
    fn drop(&mut self) {
        self.key_bytes.zeroize();
    }
}

impl fmt::Debug for VolatileKeyCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VolatileKeyCell")
            .field("key_bytes", &"[redacted]")
            .field("created_at", &self.created_at)
            .field("purged_at", &self.purged_at)
            .field("purge_flag", &self.purge_flag)
            .finish()
    }
}

/// Hybrid-encrypted session payload as carried in a broadcast frame body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedSessionPayload {
    pub session_id: SessionId,
    pub kem_ephemeral_pub: [u8; 32],
    pub nonce: [u8; NONCE_LEN],
    /// AES-256-GCM output, tag appended.
    pub ciphertext: Vec<u8>,
    /// HMAC-SHA256 over the canonical body (session id, ephemeral public
    /// key, nonce, ciphertext, in that order).
    pub mac: [u8; MAC_LEN],
}

impl EncryptedSessionPayload {
    /// Canonical body layout: fixed fields then ciphertext.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 32 + NONCE_LEN + MAC_LEN + 4 + self.ciphertext.len());
        out.extend_from_slice(self.session_id.as_bytes());
        out.extend_from_slice(&self.kem_ephemeral_pub);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.mac);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        const FIXED: usize = 16 + 32 + NONCE_LEN + MAC_LEN + 4;
        if bytes.len() < FIXED {
            return None;
        }
        let mut session = [0u8; 16];
        session.copy_from_slice(&bytes[0..16]);
        let mut kem = [0u8; 32];
        kem.copy_from_slice(&bytes[16..48]);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&bytes[48..60]);
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&bytes[60..92]);
        let len = u32::from_be_bytes(bytes[92..96].try_into().unwrap()) as usize;
        if bytes.len() != FIXED + len {
            return None;
        }
        Some(EncryptedSessionPayload {
            session_id: SessionId::from_bytes(session),
            kem_ephemeral_pub: kem,
            nonce,
            ciphertext: bytes[FIXED..].to_vec(),
            mac,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncryptError {
    #[error("plaintext must be non-empty")]
    EmptyPlaintext,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecryptError {
    #[error("key cell already purged")]
    AlreadyPurged,
    #[error("payload authentication failed")]
    AuthFailure,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AcceptError {
    #[error("optical key frame expired")]
    Expired,
    #[error("optical key frame is for a different session")]
    SessionMismatch,
}

/// Generate a fresh session keypair and identifier.
pub fn generate_session<R: RngCore + CryptoRng>(rng: &mut R) -> SessionKeypair {
    let secret = StaticSecret::random_from_rng(&mut *rng);
    let public = PublicKey::from(&secret);
    let mut id = [0u8; 16];
    rng.fill_bytes(&mut id);
    SessionKeypair {
        session_id: SessionId::from_bytes(id),
        public,
        secret,
    }
}

fn derive_keys(shared: &[u8; 32], session_id: &SessionId) -> (Zeroizing<[u8; 32]>, Zeroizing<[u8; 32]>) {
    let hk = Hkdf::<Sha256>::new(Some(session_id.as_bytes()), shared);
    let mut okm = Zeroizing::new([0u8; 64]);
    hk.expand(HKDF_INFO, okm.as_mut()).expect("64 bytes is a valid HKDF length");
    let mut enc = Zeroizing::new([0u8; 32]);
    let mut mac = Zeroizing::new([0u8; 32]);
    enc.copy_from_slice(&okm[..32]);
    mac.copy_from_slice(&okm[32..]);
    (enc, mac)
}

fn canonical_mac(
    mac_key: &[u8; 32],
    session_id: &SessionId,
    kem_pub: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
) -> HmacSha256 {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(mac_key).expect("any key length accepted");
    mac.update(session_id.as_bytes());
    mac.update(kem_pub);
    mac.update(nonce);
    mac.update(ciphertext);
    mac
}

/// Encrypt a session payload under the session public key.
pub fn encrypt_payload<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    session_id: SessionId,
    recipient: &PublicKey,
    rng: &mut R,
) -> Result<EncryptedSessionPayload, EncryptError> {
    if plaintext.is_empty() {
        return Err(EncryptError::EmptyPlaintext);
    }
    let ephemeral = StaticSecret::random_from_rng(&mut *rng);
    let kem_pub = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(recipient);
    let (enc_key, mac_key) = derive_keys(shared.as_bytes(), &session_id);

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);

    let mut aad = Vec::with_capacity(48);
    aad.extend_from_slice(session_id.as_bytes());
    aad.extend_from_slice(kem_pub.as_bytes());

    let cipher = Aes256Gcm::new_from_slice(enc_key.as_ref()).expect("32-byte key");
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &aad })
        .expect("in-memory encryption cannot fail");

    let mac = canonical_mac(&mac_key, &session_id, kem_pub.as_bytes(), &nonce, &ciphertext)
        .finalize()
        .into_bytes();

    Ok(EncryptedSessionPayload {
        session_id,
        kem_ephemeral_pub: *kem_pub.as_bytes(),
        nonce,
        ciphertext,
        mac: mac.into(),
    })
}

/// Decrypt a session payload with the key held in `cell`.
///
/// The cell is purged before this function returns, on success and on
/// authentication failure alike. A tampered payload therefore costs the
/// session its key: fail closed, never retry with the same material.
pub fn decrypt_payload(
    payload: &EncryptedSessionPayload,
    cell: &mut VolatileKeyCell,
    now: SimTime,
) -> Result<Zeroizing<Vec<u8>>, DecryptError> {
    if cell.purge_flag {
        return Err(DecryptError::AlreadyPurged);
    }

    let secret = StaticSecret::from(cell.key_bytes);
    let shared = secret.diffie_hellman(&PublicKey::from(payload.kem_ephemeral_pub));
    let (enc_key, mac_key) = derive_keys(shared.as_bytes(), &payload.session_id);

    let mac = canonical_mac(
        &mac_key,
        &payload.session_id,
        &payload.kem_ephemeral_pub,
        &payload.nonce,
        &payload.ciphertext,
    );
    if mac.verify_slice(&payload.mac).is_err() {
        cell.purge(now);
        return Err(DecryptError::AuthFailure);
    }

    let mut aad = Vec::with_capacity(48);
    aad.extend_from_slice(payload.session_id.as_bytes());
    aad.extend_from_slice(&payload.kem_ephemeral_pub);

    let cipher = Aes256Gcm::new_from_slice(enc_key.as_ref()).expect("32-byte key");
    let opened = cipher.decrypt(
        Nonce::from_slice(&payload.nonce),
        Payload { msg: &payload.ciphertext, aad: &aad },
    );

    match opened {
        Ok(plaintext) => {
            cell.purge(now);
            Ok(Zeroizing::new(plaintext))
        }
        Err(_) => {
            cell.purge(now);
            Err(DecryptError::AuthFailure)
        }
    }
}

/// Accept an optical key frame at the terminal, enforcing the expiry window.
///
/// The window is inclusive: arrival at exactly `issued_at + ttl` is still
/// valid; one tick later is not.
pub fn accept_optical_frame(
    frame: OpticalKeyFrame,
    expected_session: SessionId,
    now: SimTime,
) -> Result<VolatileKeyCell, AcceptError> {
    if frame.session_id != expected_session {
        return Err(AcceptError::SessionMismatch);
    }
    if now.since(frame.issued_at) > frame.ttl {
        return Err(AcceptError::Expired);
    }
    Ok(VolatileKeyCell {
        key_bytes: *frame.key,
        created_at: now,
        purged_at: None,
        purge_flag: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    fn cell_for(keypair_rng: &mut ChaCha20Rng) -> (SessionId, PublicKey, VolatileKeyCell) {
        let kp = generate_session(keypair_rng);
        let session = kp.session_id;
        let public = kp.public_key();
        let frame = kp.into_key_material(SimDuration::from_secs(60)).into_frame(SimTime::ZERO);
        let cell = accept_optical_frame(frame, session, SimTime::ZERO).unwrap();
        (session, public, cell)
    }

    #[test]
    fn fresh_sessions_are_distinct() {
        let mut rng = rng();
        let a = generate_session(&mut rng);
        let b = generate_session(&mut rng);
        assert_ne!(a.session_id, b.session_id);
        assert_ne!(a.public_key().as_bytes(), b.public_key().as_bytes());
    }

    #[test]
    fn round_trip_and_purge() {
        let mut rng = rng();
        let (session, public, mut cell) = cell_for(&mut rng);
        let payload = encrypt_payload(b"clinical payload", session, &public, &mut rng).unwrap();

        let now = SimTime::from_micros(5);
        let plaintext = decrypt_payload(&payload, &mut cell, now).unwrap();
        assert_eq!(&plaintext[..], b"clinical payload");
        assert!(cell.purge_flag);
        assert_eq!(cell.purged_at, Some(now));
        assert!(cell.bytes_are_zeroized());
    }

    #[test]
    fn second_decrypt_sees_purged_cell() {
        let mut rng = rng();
        let (session, public, mut cell) = cell_for(&mut rng);
        let payload = encrypt_payload(b"x", session, &public, &mut rng).unwrap();
        decrypt_payload(&payload, &mut cell, SimTime::ZERO).unwrap();
        assert_eq!(
            decrypt_payload(&payload, &mut cell, SimTime::ZERO),
            Err(DecryptError::AlreadyPurged)
        );
    }

    #[test]
    fn wrong_key_fails_auth_without_plaintext() {
        let mut rng = rng();
        let sender = generate_session(&mut rng);
        let payload =
            encrypt_payload(b"secret", sender.session_id, &sender.public_key(), &mut rng).unwrap();

        // A cell holding a different session's key, relabeled to pass the
        // session check: authentication must still fail.
        let other = generate_session(&mut rng);
        let material = other.into_key_material(SimDuration::from_secs(60));
        let frame = material.into_frame(SimTime::ZERO);
        let mut cell = VolatileKeyCell {
            key_bytes: *frame.key,
            created_at: SimTime::ZERO,
            purged_at: None,
            purge_flag: false,
        };
        let err = decrypt_payload(&payload, &mut cell, SimTime::ZERO).unwrap_err();
        assert_eq!(err, DecryptError::AuthFailure);
        // Fail-closed: the cell is purged on auth failure too.
        assert!(cell.purge_flag);
        assert!(cell.bytes_are_zeroized());
    }

    #[test]
    fn empty_plaintext_rejected() {
        let mut rng = rng();
        let kp = generate_session(&mut rng);
        assert_eq!(
            encrypt_payload(b"", kp.session_id, &kp.public_key(), &mut rng),
            Err(EncryptError::EmptyPlaintext)
        );
    }

    #[test]
    fn ttl_boundary_is_inclusive() {
        let mut rng = rng();
        let ttl = SimDuration::from_secs(60);

        for (offset_us, ok) in [(0, true), (ttl.as_micros(), true), (ttl.as_micros() + 1, false)] {
            let kp = generate_session(&mut rng);
            let session = kp.session_id;
            let frame = kp.into_key_material(ttl).into_frame(SimTime::ZERO);
            let outcome = accept_optical_frame(frame, session, SimTime::from_micros(offset_us));
            assert_eq!(outcome.is_ok(), ok, "offset {offset_us}");
            if !ok {
                assert_eq!(outcome.unwrap_err(), AcceptError::Expired);
            }
        }
    }

    #[test]
    fn session_mismatch_rejected() {
        let mut rng = rng();
        let kp = generate_session(&mut rng);
        let other = generate_session(&mut rng).session_id;
        let frame = kp.into_key_material(SimDuration::from_secs(60)).into_frame(SimTime::ZERO);
        assert_eq!(
            accept_optical_frame(frame, other, SimTime::ZERO).unwrap_err(),
            AcceptError::SessionMismatch
        );
    }

    #[test]
    fn payload_body_round_trips() {
        let mut rng = rng();
        let kp = generate_session(&mut rng);
        let payload = encrypt_payload(b"abc", kp.session_id, &kp.public_key(), &mut rng).unwrap();
        let bytes = payload.encode();
        assert_eq!(EncryptedSessionPayload::decode(&bytes), Some(payload));
        assert_eq!(EncryptedSessionPayload::decode(&bytes[..bytes.len() - 1]), None);
        assert_eq!(EncryptedSessionPayload::decode(&[0u8; 10]), None);
    }

    #[test]
    fn security_level_is_reported_as_128() {
        assert_eq!(CLASSICAL_SECURITY_BITS, 128);
    }
}
