//! Signed encrypted packet format for the inbound broadcast channel.
//!
//! Every frame on the inbound channel is signed by the fleet backend and
//! verified by the receiver before any payload byte is interpreted. The
//! layout is canonical and byte-exact so independent implementations can
//! interoperate:
//!
//! ```text
//! offset  size  field
//! 0       4     magic            "SVB1"
//! 4       1     version          0x01
//! 5       1     payload type     (see PayloadType)
//! 6       16    destination      DeviceId (all-0xFF = fleet broadcast)
//! 22      8     sequence         big-endian u64, monotonic per stream
//! 30      4     ciphertext_len   big-endian u32
//! 34      n     ciphertext       opaque payload body
//! 34+n    64    signature        Ed25519 over bytes [0, 34+n)
//! ```
//!
//! A stream is one `(destination, payload type)` pair. Sequence numbers are
//! strictly increasing within a stream; broadcast carousels re-send frames
//! verbatim, so a retransmit carries the same sequence and is idempotently
//! ignored after first acceptance.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame magic, first four bytes of every packet.
pub const MAGIC: [u8; 4] = *b"SVB1";

/// Current wire format version.
pub const WIRE_VERSION: u8 = 1;

/// Fixed header length in bytes (everything before the ciphertext).
pub const HEADER_LEN: usize = 34;

/// Ed25519 signature length.
pub const SIGNATURE_LEN: usize = 64;

/// Hard ceiling on ciphertext size: a generous multiple of any realistic
/// channel MTU. Large artifacts (firmware images) are chunked below this.
pub const MAX_CIPHERTEXT_LEN: usize = 4 * 1024 * 1024;

/// 16-byte opaque terminal address.
///
/// The all-0xFF value is reserved as the fleet broadcast group address;
/// addressed and fleet-wide payloads coexist on the same channel.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId([u8; 16]);

impl DeviceId {
    pub const LEN: usize = 16;

    /// Fleet broadcast group address.
    pub const BROADCAST: DeviceId = DeviceId([0xFF; 16]);

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        DeviceId(bytes)
    }

    /// Derive a stable DeviceId from a human-readable name.
    pub fn from_name(name: &str) -> Self {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(name.as_bytes());
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        DeviceId(id)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn is_broadcast(&self) -> bool {
        *self == Self::BROADCAST
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({})", hex::encode(self.0))
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for DeviceId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let bytes: [u8; 16] = raw
            .try_into()
            .map_err(|_| serde::de::Error::custom("device id must be 16 bytes"))?;
        Ok(DeviceId(bytes))
    }
}

/// Payload classes carried on the inbound channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PayloadType {
    SessionPayload,
    FirmwareChunk,
    Revocation,
    RestartCommand,
    TroubleshootCommand,
}

impl PayloadType {
    pub const ALL: [PayloadType; 5] = [
        PayloadType::SessionPayload,
        PayloadType::FirmwareChunk,
        PayloadType::Revocation,
        PayloadType::RestartCommand,
        PayloadType::TroubleshootCommand,
    ];

    pub fn code(self) -> u8 {
        match self {
            PayloadType::SessionPayload => 1,
            PayloadType::FirmwareChunk => 2,
            PayloadType::Revocation => 3,
            PayloadType::RestartCommand => 4,
            PayloadType::TroubleshootCommand => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(PayloadType::SessionPayload),
            2 => Some(PayloadType::FirmwareChunk),
            3 => Some(PayloadType::Revocation),
            4 => Some(PayloadType::RestartCommand),
            5 => Some(PayloadType::TroubleshootCommand),
            _ => None,
        }
    }
}

/// Backend signing keypair. The private half never leaves the backend; the
/// terminal is provisioned with the verifying half only.
pub struct SigningKeypair {
    signing: SigningKey,
    verifying: VerifyingKey,
}

impl SigningKeypair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let signing = SigningKey::generate(rng);
        let verifying = signing.verifying_key();
        SigningKeypair { signing, verifying }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.verifying
    }
}

impl fmt::Debug for SigningKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeypair")
            .field("verifying", &hex::encode(self.verifying.as_bytes()))
            .field("signing", &"[redacted]")
            .finish()
    }
}

/// Unsigned packet fields, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketFields {
    pub payload_type: PayloadType,
    pub destination: DeviceId,
    pub sequence: u64,
    pub ciphertext: Vec<u8>,
}

/// A signed broadcast frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedPacket {
    pub version: u8,
    pub payload_type: PayloadType,
    pub destination: DeviceId,
    pub sequence: u64,
    pub ciphertext: Vec<u8>,
    pub signature: [u8; SIGNATURE_LEN],
}

impl SignedPacket {
    /// Total encoded frame length.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.ciphertext.len() + SIGNATURE_LEN
    }

    /// Bytes charged against channel airtime. The scheduler counts content
    /// bytes; framing overhead belongs to the encapsulation layer, which is
    /// abstracted along with the physical layer.
    pub fn airtime_bytes(&self) -> u64 {
        self.ciphertext.len() as u64
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("ciphertext length {len} exceeds maximum {max}")]
    CiphertextTooLarge { len: usize, max: usize },
}

/// Reasons a frame is rejected before its payload is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    BadMagic,
    BadVersion,
    BadLength,
    UnknownPayloadType,
    BadSignature,
    ReplayedSequence,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            RejectReason::BadMagic => "bad magic",
            RejectReason::BadVersion => "bad version",
            RejectReason::BadLength => "bad length",
            RejectReason::UnknownPayloadType => "unknown payload type",
            RejectReason::BadSignature => "bad signature",
            RejectReason::ReplayedSequence => "replayed sequence",
        };
        f.write_str(text)
    }
}

/// Serialize a packet to its canonical byte layout.
///
/// Encoding is deterministic: the same packet always yields identical bytes.
pub fn encode_packet(packet: &SignedPacket) -> Result<Vec<u8>, EncodeError> {
    if packet.ciphertext.len() > MAX_CIPHERTEXT_LEN {
        return Err(EncodeError::CiphertextTooLarge {
            len: packet.ciphertext.len(),
            max: MAX_CIPHERTEXT_LEN,
        });
    }
    let mut out = Vec::with_capacity(packet.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(packet.version);
    out.push(packet.payload_type.code());
    out.extend_from_slice(packet.destination.as_bytes());
    out.extend_from_slice(&packet.sequence.to_be_bytes());
    out.extend_from_slice(&(packet.ciphertext.len() as u32).to_be_bytes());
    out.extend_from_slice(&packet.ciphertext);
    out.extend_from_slice(&packet.signature);
    Ok(out)
}

fn signed_region(fields: &PacketFields) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + fields.ciphertext.len());
    buf.extend_from_slice(&MAGIC);
    buf.push(WIRE_VERSION);
    buf.push(fields.payload_type.code());
    buf.extend_from_slice(fields.destination.as_bytes());
    buf.extend_from_slice(&fields.sequence.to_be_bytes());
    buf.extend_from_slice(&(fields.ciphertext.len() as u32).to_be_bytes());
    buf.extend_from_slice(&fields.ciphertext);
    buf
}

/// Sign packet fields with the backend signing key.
///
/// Only the fleet backend holds a [`SigningKeypair`]; terminal-side code has
/// no path to this operation because it never owns the private half.
pub fn sign_packet(fields: PacketFields, key: &SigningKeypair) -> SignedPacket {
    let msg = signed_region(&fields);
    let sig: Signature = key.signing.sign(&msg);
    SignedPacket {
        version: WIRE_VERSION,
        payload_type: fields.payload_type,
        destination: fields.destination,
        sequence: fields.sequence,
        ciphertext: fields.ciphertext,
        signature: sig.to_bytes(),
    }
}

/// Receiver-side decoder: holds the trusted verifying key, the per-stream
/// replay windows, and the verify-before-parse instrumentation counters.
///
/// One decoder belongs to one receiver and is not shared across threads.
#[derive(Debug)]
pub struct PacketDecoder {
    trusted_key: VerifyingKey,
    last_sequence: BTreeMap<(DeviceId, u8), u64>,
    counters: DecodeCounters,
}

/// Instrumentation for the parse-after-verify discipline. The payload parse
/// counter may never exceed the signature accept counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecodeCounters {
    pub signature_accepts: u64,
    pub payload_parses: u64,
    pub rejects: u64,
}

impl PacketDecoder {
    pub fn new(trusted_key: VerifyingKey) -> Self {
        PacketDecoder {
            trusted_key,
            last_sequence: BTreeMap::new(),
            counters: DecodeCounters::default(),
        }
    }

    pub fn counters(&self) -> DecodeCounters {
        self.counters
    }

    /// Record that a payload body is about to be interpreted. Callers must
    /// invoke this before parsing the ciphertext of an accepted packet.
    pub fn begin_payload_parse(&mut self) {
        self.counters.payload_parses += 1;
        debug_assert!(self.counters.payload_parses <= self.counters.signature_accepts);
    }

    /// Parse and verify a received frame. Hostile input is expected: the
    /// ciphertext is never interpreted here, and nothing past the fixed
    /// header is trusted until the signature has been checked.
    pub fn decode_and_verify(&mut self, bytes: &[u8]) -> Result<SignedPacket, RejectReason> {
        match self.try_decode(bytes) {
            Ok(packet) => {
                self.counters.signature_accepts += 1;
                let stream = (packet.destination, packet.payload_type.code());
                self.last_sequence.insert(stream, packet.sequence);
                Ok(packet)
            }
            Err(reason) => {
                self.counters.rejects += 1;
                Err(reason)
            }
        }
    }

    fn try_decode(&self, bytes: &[u8]) -> Result<SignedPacket, RejectReason> {
        if bytes.len() < HEADER_LEN + SIGNATURE_LEN {
            return Err(RejectReason::BadLength);
        }
        if bytes[0..4] != MAGIC {
            return Err(RejectReason::BadMagic);
        }
        let version = bytes[4];
        if version != WIRE_VERSION {
            return Err(RejectReason::BadVersion);
        }
        let payload_type =
            PayloadType::from_code(bytes[5]).ok_or(RejectReason::UnknownPayloadType)?;
        let mut dest = [0u8; 16];
        dest.copy_from_slice(&bytes[6..22]);
        let destination = DeviceId::from_bytes(dest);
        let sequence = u64::from_be_bytes(bytes[22..30].try_into().unwrap());
        let ciphertext_len = u32::from_be_bytes(bytes[30..34].try_into().unwrap()) as usize;
        if ciphertext_len > MAX_CIPHERTEXT_LEN {
            return Err(RejectReason::BadLength);
        }
        if bytes.len() != HEADER_LEN + ciphertext_len + SIGNATURE_LEN {
            return Err(RejectReason::BadLength);
        }
        let signed = &bytes[..HEADER_LEN + ciphertext_len];
        let sig_bytes: [u8; SIGNATURE_LEN] = bytes[HEADER_LEN + ciphertext_len..]
            .try_into()
            .map_err(|_| RejectReason::BadLength)?;
        let signature = Signature::from_bytes(&sig_bytes);
        self.trusted_key
            .verify(signed, &signature)
            .map_err(|_| RejectReason::BadSignature)?;

        // Signature is good; replay suppression is the last gate.
        let stream = (destination, payload_type.code());
        if let Some(&last) = self.last_sequence.get(&stream) {
            if sequence <= last {
                return Err(RejectReason::ReplayedSequence);
            }
        }

        Ok(SignedPacket {
            version,
            payload_type,
            destination,
            sequence,
            ciphertext: bytes[HEADER_LEN..HEADER_LEN + ciphertext_len].to_vec(),
            signature: sig_bytes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    fn sample_packet(key: &SigningKeypair, seq: u64, ciphertext: Vec<u8>) -> SignedPacket {
        sign_packet(
            PacketFields {
                payload_type: PayloadType::SessionPayload,
                destination: DeviceId::from_name("t-unit"),
                sequence: seq,
                ciphertext,
            },
            key,
        )
    }

    #[test]
    fn empty_payload_round_trip() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let packet = sample_packet(&key, 1, vec![]);
        let bytes = encode_packet(&packet).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + SIGNATURE_LEN);

        let mut decoder = PacketDecoder::new(key.verifying_key());
        let decoded = decoder.decode_and_verify(&bytes).unwrap();
        assert_eq!(decoded, packet);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let packet = sample_packet(&key, 9, b"payload".to_vec());
        assert_eq!(encode_packet(&packet).unwrap(), encode_packet(&packet).unwrap());
    }

    #[test]
    fn oversize_ciphertext_rejected_at_encode() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let mut packet = sample_packet(&key, 1, vec![]);
        packet.ciphertext = vec![0u8; MAX_CIPHERTEXT_LEN + 1];
        assert!(matches!(
            encode_packet(&packet),
            Err(EncodeError::CiphertextTooLarge { .. })
        ));
    }

    #[test]
    fn verify_rejects_wrong_key() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let other = SigningKeypair::generate(&mut rng);
        let bytes = encode_packet(&sample_packet(&key, 1, b"x".to_vec())).unwrap();
        let mut decoder = PacketDecoder::new(other.verifying_key());
        assert_eq!(decoder.decode_and_verify(&bytes), Err(RejectReason::BadSignature));
        assert_eq!(decoder.counters().signature_accepts, 0);
    }

    #[test]
    fn replayed_sequence_rejected() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let bytes = encode_packet(&sample_packet(&key, 5, b"x".to_vec())).unwrap();
        let mut decoder = PacketDecoder::new(key.verifying_key());
        assert!(decoder.decode_and_verify(&bytes).is_ok());
        assert_eq!(decoder.decode_and_verify(&bytes), Err(RejectReason::ReplayedSequence));

        // Backward reorder on the same stream is also rejected.
        let older = encode_packet(&sample_packet(&key, 4, b"y".to_vec())).unwrap();
        assert_eq!(decoder.decode_and_verify(&older), Err(RejectReason::ReplayedSequence));
    }

    #[test]
    fn streams_are_independent() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let dest = DeviceId::from_name("t-unit");
        let session = sign_packet(
            PacketFields {
                payload_type: PayloadType::SessionPayload,
                destination: dest,
                sequence: 3,
                ciphertext: vec![],
            },
            &key,
        );
        let firmware = sign_packet(
            PacketFields {
                payload_type: PayloadType::FirmwareChunk,
                destination: dest,
                sequence: 1,
                ciphertext: vec![],
            },
            &key,
        );
        let mut decoder = PacketDecoder::new(key.verifying_key());
        assert!(decoder.decode_and_verify(&encode_packet(&session).unwrap()).is_ok());
        // Lower sequence, different payload-type stream: accepted.
        assert!(decoder.decode_and_verify(&encode_packet(&firmware).unwrap()).is_ok());
    }

    #[test]
    fn every_header_reject_reason_is_reachable() {
        let mut rng = rng();
        let key = SigningKeypair::generate(&mut rng);
        let good = encode_packet(&sample_packet(&key, 1, b"zz".to_vec())).unwrap();
        let mut decoder = PacketDecoder::new(key.verifying_key());

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xFF;
        assert_eq!(decoder.decode_and_verify(&bad_magic), Err(RejectReason::BadMagic));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        assert_eq!(decoder.decode_and_verify(&bad_version), Err(RejectReason::BadVersion));

        let mut bad_type = good.clone();
        bad_type[5] = 0;
        assert_eq!(
            decoder.decode_and_verify(&bad_type),
            Err(RejectReason::UnknownPayloadType)
        );

        assert_eq!(
            decoder.decode_and_verify(&good[..10]),
            Err(RejectReason::BadLength)
        );

        let mut truncated = good.clone();
        truncated.pop();
        assert_eq!(decoder.decode_and_verify(&truncated), Err(RejectReason::BadLength));

        assert_eq!(decoder.counters().payload_parses, 0);
        assert_eq!(decoder.counters().signature_accepts, 0);
    }

    #[test]
    fn broadcast_address_is_all_ff() {
        assert_eq!(DeviceId::BROADCAST.as_bytes(), &[0xFF; 16]);
        assert!(DeviceId::BROADCAST.is_broadcast());
        assert!(!DeviceId::from_name("t").is_broadcast());
    }

    #[test]
    fn payload_type_codes_round_trip() {
        for pt in PayloadType::ALL {
            assert_eq!(PayloadType::from_code(pt.code()), Some(pt));
        }
        assert_eq!(PayloadType::from_code(0), None);
        assert_eq!(PayloadType::from_code(6), None);
    }
}
