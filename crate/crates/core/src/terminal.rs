//! Sovereign terminal state machine.
//!
//! The terminal owns exactly two I/O surfaces: the receive side of the
//! inbound channel and the line-of-sight optical link to its companion.
//! Nothing in this module can produce a network send; there is no operation
//! returning a network-send effect anywhere in the terminal API.
//!
//! Session flow: the encrypted payload arrives over the inbound channel and
//! waits in `pending_payloads`. When a user initiates a session the terminal
//! displays the session-start code, accepts the time-bounded optical key
//! frame, decrypts (key purged before the call returns), feeds the plaintext
//! to the on-device inference stub, renders the output frame to the display,
//! and emits the session-end code with the measured duration.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::VerifyingKey;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{ChannelConfig, InboundEndpoint, OpticalLink};
use crate::session_crypto::{
    accept_optical_frame, decrypt_payload, AcceptError, DecryptError, EncryptedSessionPayload,
    OpticalKeyFrame, SessionId,
};
use crate::time::{SimDuration, SimTime};
use crate::trace::LifecycleKind;
use crate::wire::{DeviceId, PacketDecoder, PayloadType, RejectReason, SignedPacket};

/// Simulated decrypt cost: one tick between key acceptance and purge.
const DECRYPT_TICK: SimDuration = SimDuration::from_micros(1);

/// USB device identity as seen at enumeration time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct UsbDescriptor {
    pub vendor_id: u16,
    pub product_id: u16,
    pub device_class: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UsbOutcome {
    Enumerated,
    Blocked,
}

/// Diagnostic state rendered to the terminal display on a troubleshoot
/// command. Display-only: this type has no serialization codec and never
/// leaves the terminal on any channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosticBlock {
    pub firmware_version: u32,
    pub model_version: u32,
    pub peripheral_status: String,
    pub error_codes: Vec<u16>,
    pub signal_strength_dbm: i16,
    pub storage_health: String,
    pub last_operational_state: String,
}

impl DiagnosticBlock {
    pub fn render(&self) -> String {
        format!(
            "fw={} model={} peripherals={} errors={:?} signal={}dBm storage={} state={}",
            self.firmware_version,
            self.model_version,
            self.peripheral_status,
            self.error_codes,
            self.signal_strength_dbm,
            self.storage_health,
            self.last_operational_state,
        )
    }
}

/// Optical lifecycle code shown on the display at session start and end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LifecycleCode {
    pub device: DeviceId,
    pub session_id: SessionId,
    pub kind: LifecycleKind,
    pub timestamp: SimTime,
    /// Session duration; present on end codes only.
    pub duration: Option<SimDuration>,
}

/// Session output rendered to the display for the companion to capture.
/// Transits the optical link only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOutputFrame {
    pub session_id: SessionId,
    pub output: String,
    pub displayed_at: SimTime,
}

/// Firmware chunk body carried in a FirmwareChunk frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareBody {
    pub version: u32,
    pub chunk_index: u32,
    pub chunk_count: u32,
    pub data: Vec<u8>,
}

impl FirmwareBody {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        out.extend_from_slice(&self.version.to_be_bytes());
        out.extend_from_slice(&self.chunk_index.to_be_bytes());
        out.extend_from_slice(&self.chunk_count.to_be_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 12 {
            return None;
        }
        let version = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let chunk_index = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
        let chunk_count = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
        if chunk_count == 0 || chunk_index >= chunk_count {
            return None;
        }
        Some(FirmwareBody { version, chunk_index, chunk_count, data: bytes[12..].to_vec() })
    }
}

/// Deterministic stand-in for the on-device inference pipeline: consumes the
/// decrypted payload, returns a summary plus a simulated compute time.
pub type InferenceStub = fn(&[u8]) -> (String, SimDuration);

/// Default stub: length plus digest echo, linear compute cost.
pub fn digest_echo_stub(plaintext: &[u8]) -> (String, SimDuration) {
    let digest = Sha256::digest(plaintext);
    let summary = format!("len={} digest={}", plaintext.len(), hex::encode(&digest[..8]));
    (summary, SimDuration::from_micros(1_000_000 + plaintext.len() as u64))
}

/// State transitions reported by packet handling and session runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TerminalEvent {
    PayloadStored { session_id: SessionId },
    FirmwareChunkStored { version: u32, index: u32, have: u32, need: u32 },
    FirmwareApplied { version: u32 },
    RevocationApplied,
    RestartExecuted,
    DiagnosticDisplayed { text: String },
    StartCodeDisplayed { session_id: SessionId },
    KeyAccepted { session_id: SessionId },
    DecryptedAndPurged { session_id: SessionId },
    OutputDisplayed { session_id: SessionId, output_len: usize },
    EndCodeDisplayed { session_id: SessionId, duration: SimDuration },
    SessionAborted { session_id: SessionId, reason: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandleError {
    /// Terminal is revoked: session and firmware payloads are dropped.
    #[error("terminal revoked; {payload_type:?} dropped")]
    RevokedTerminal { payload_type: PayloadType },
    /// The body does not parse as the declared payload type.
    #[error("body does not parse as {payload_type:?}")]
    UnknownPayloadType { payload_type: PayloadType },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("no pending payload for this session")]
    NoPendingPayload,
    #[error("optical key frame expired")]
    Expired,
    #[error("optical key frame is for a different session")]
    SessionMismatch,
    #[error("payload authentication failed")]
    AuthFailure,
}

/// Outcome of feeding one received frame through decode-and-verify and the
/// packet handler.
#[derive(Debug)]
pub enum ReceiveOutcome {
    Rejected(RejectReason),
    NotAddressed,
    Handled(Vec<TerminalEvent>),
    Refused(HandleError),
}

/// A completed session run with its timing and optical artifacts.
#[derive(Debug)]
pub struct SessionRun {
    pub session_id: SessionId,
    pub started_at: SimTime,
    pub decrypted_at: SimTime,
    pub output_at: SimTime,
    pub duration: SimDuration,
    pub output: SessionOutputFrame,
    pub start_code: LifecycleCode,
    pub end_code: LifecycleCode,
    pub events: Vec<TerminalEvent>,
    /// Key cell state observed before returning: purged and zeroized.
    pub purge_verified: bool,
}

/// A session attempt that displayed the start code but aborted before
/// completing. The pending payload is retained for retry.
#[derive(Debug)]
pub struct SessionAbort {
    pub error: SessionError,
    pub start_code: Option<LifecycleCode>,
    pub events: Vec<TerminalEvent>,
}

#[derive(Debug)]
struct FirmwareAssembly {
    chunk_count: u32,
    received: BTreeMap<u32, usize>,
}

/// The terminal.
#[derive(Debug)]
pub struct TerminalState {
    pub device: DeviceId,
    decoder: PacketDecoder,
    pub endpoint: InboundEndpoint,
    pub optical: OpticalLink,
    pending_payloads: BTreeMap<SessionId, EncryptedSessionPayload>,
    pub firmware_version: u32,
    pub model_version: u32,
    firmware_rx: BTreeMap<u32, FirmwareAssembly>,
    pub revoked: bool,
    usb_whitelist: BTreeSet<UsbDescriptor>,
    pub diagnostic: DiagnosticBlock,
    pub inference: InferenceStub,
}

impl TerminalState {
    pub fn new(
        device: DeviceId,
        trusted_key: VerifyingKey,
        config: &ChannelConfig,
        usb_whitelist: impl IntoIterator<Item = UsbDescriptor>,
    ) -> Self {
        let firmware_version = 1;
        let model_version = 1;
        TerminalState {
            device,
            decoder: PacketDecoder::new(trusted_key),
            endpoint: InboundEndpoint::for_config(config, device),
            optical: OpticalLink { line_of_sight: true },
            pending_payloads: BTreeMap::new(),
            firmware_version,
            model_version,
            firmware_rx: BTreeMap::new(),
            revoked: false,
            usb_whitelist: usb_whitelist.into_iter().collect(),
            diagnostic: DiagnosticBlock {
                firmware_version,
                model_version,
                peripheral_status: "all-ok".into(),
                error_codes: Vec::new(),
                signal_strength_dbm: -62,
                storage_health: "nominal".into(),
                last_operational_state: "provisioned".into(),
            },
            inference: digest_echo_stub,
        }
    }

    pub fn decoder_counters(&self) -> crate::wire::DecodeCounters {
        self.decoder.counters()
    }

    pub fn pending_session_count(&self) -> usize {
        self.pending_payloads.len()
    }

    pub fn has_pending_session(&self, session_id: &SessionId) -> bool {
        self.pending_payloads.contains_key(session_id)
    }

    /// Decode, verify, and handle one received frame.
    pub fn receive_frame(&mut self, bytes: &[u8], now: SimTime) -> ReceiveOutcome {
        let packet = match self.decoder.decode_and_verify(bytes) {
            Ok(p) => p,
            Err(reason) => return ReceiveOutcome::Rejected(reason),
        };
        if packet.destination != self.device && !packet.destination.is_broadcast() {
            return ReceiveOutcome::NotAddressed;
        }
        match self.handle_packet(&packet, now) {
            Ok(events) => ReceiveOutcome::Handled(events),
            Err(e) => ReceiveOutcome::Refused(e),
        }
    }

    /// Apply one verified packet to terminal state.
    ///
    /// The packet must already have passed [`PacketDecoder::decode_and_verify`]
    /// and be addressed to this device or to the broadcast group.
    pub fn handle_packet(
        &mut self,
        packet: &SignedPacket,
        now: SimTime,
    ) -> Result<Vec<TerminalEvent>, HandleError> {
        debug_assert!(packet.destination == self.device || packet.destination.is_broadcast());
        match packet.payload_type {
            PayloadType::SessionPayload => self.handle_session_payload(packet),
            PayloadType::FirmwareChunk => self.handle_firmware_chunk(packet),
            PayloadType::Revocation => {
                if self.revoked {
                    return Ok(vec![]);
                }
                self.revoked = true;
                Ok(vec![TerminalEvent::RevocationApplied])
            }
            PayloadType::RestartCommand => {
                self.diagnostic.error_codes.clear();
                self.diagnostic.last_operational_state = format!("restarted@{now}");
                Ok(vec![TerminalEvent::RestartExecuted])
            }
            PayloadType::TroubleshootCommand => {
                let text = self.diagnostic.render();
                Ok(vec![TerminalEvent::DiagnosticDisplayed { text }])
            }
        }
    }

    fn handle_session_payload(
        &mut self,
        packet: &SignedPacket,
    ) -> Result<Vec<TerminalEvent>, HandleError> {
        if self.revoked {
            return Err(HandleError::RevokedTerminal { payload_type: PayloadType::SessionPayload });
        }
        self.decoder.begin_payload_parse();
        let payload = EncryptedSessionPayload::decode(&packet.ciphertext)
            .ok_or(HandleError::UnknownPayloadType { payload_type: PayloadType::SessionPayload })?;
        let session_id = payload.session_id;
        self.pending_payloads.insert(session_id, payload);
        Ok(vec![TerminalEvent::PayloadStored { session_id }])
    }

    fn handle_firmware_chunk(
        &mut self,
        packet: &SignedPacket,
    ) -> Result<Vec<TerminalEvent>, HandleError> {
        if self.revoked {
            return Err(HandleError::RevokedTerminal { payload_type: PayloadType::FirmwareChunk });
        }
        self.decoder.begin_payload_parse();
        let body = FirmwareBody::decode(&packet.ciphertext)
            .ok_or(HandleError::UnknownPayloadType { payload_type: PayloadType::FirmwareChunk })?;

        let assembly = self
            .firmware_rx
            .entry(body.version)
            .or_insert_with(|| FirmwareAssembly { chunk_count: body.chunk_count, received: BTreeMap::new() });
        // Last write wins per (version, index).
        assembly.chunk_count = body.chunk_count;
        assembly.received.insert(body.chunk_index, body.data.len());

        let have = assembly.received.len() as u32;
        let need = assembly.chunk_count;
        let mut events = vec![TerminalEvent::FirmwareChunkStored {
            version: body.version,
            index: body.chunk_index,
            have,
            need,
        }];
        if have == need {
            self.firmware_rx.remove(&body.version);
            if self.firmware_version != body.version {
                self.firmware_version = body.version;
                self.diagnostic.firmware_version = body.version;
                events.push(TerminalEvent::FirmwareApplied { version: body.version });
            }
        }
        Ok(events)
    }

    /// Run one session against a presented optical key frame.
    ///
    /// On success the pending payload is consumed and the key cell is purged
    /// and zeroized before this function returns. On any failure the payload
    /// is retained for retry and no plaintext is produced.
    pub fn run_session(
        &mut self,
        session_id: SessionId,
        frame: OpticalKeyFrame,
        now: SimTime,
    ) -> Result<SessionRun, SessionAbort> {
        if !self.pending_payloads.contains_key(&session_id) {
            return Err(SessionAbort {
                error: SessionError::NoPendingPayload,
                start_code: None,
                events: vec![],
            });
        }

        // The companion scans the start code at initiation, before the key
        // frame is read.
        let start_code = LifecycleCode {
            device: self.device,
            session_id,
            kind: LifecycleKind::SessionStart,
            timestamp: now,
            duration: None,
        };
        let mut events = vec![TerminalEvent::StartCodeDisplayed { session_id }];

        let mut cell = match accept_optical_frame(frame, session_id, now) {
            Ok(cell) => cell,
            Err(e) => {
                let error = match e {
                    AcceptError::Expired => SessionError::Expired,
                    AcceptError::SessionMismatch => SessionError::SessionMismatch,
                };
                events.push(TerminalEvent::SessionAborted {
                    session_id,
                    reason: error.to_string(),
                });
                return Err(SessionAbort { error, start_code: Some(start_code), events });
            }
        };
        events.push(TerminalEvent::KeyAccepted { session_id });

        let decrypted_at = now + DECRYPT_TICK;
        let payload = self.pending_payloads.get(&session_id).expect("checked above");
        let plaintext = match decrypt_payload(payload, &mut cell, decrypted_at) {
            Ok(p) => p,
            Err(e) => {
                debug_assert!(cell.is_purged(), "cell purged on failure too");
                let error = match e {
                    DecryptError::AuthFailure => SessionError::AuthFailure,
                    DecryptError::AlreadyPurged => SessionError::AuthFailure,
                };
                events.push(TerminalEvent::SessionAborted {
                    session_id,
                    reason: error.to_string(),
                });
                return Err(SessionAbort { error, start_code: Some(start_code), events });
            }
        };
        let purge_verified = cell.is_purged() && cell.bytes_are_zeroized() && cell.purged_at.is_some();
        self.pending_payloads.remove(&session_id);
        events.push(TerminalEvent::DecryptedAndPurged { session_id });

        let (summary, compute) = (self.inference)(&plaintext);
        drop(plaintext);

        let output_at = decrypted_at + compute;
        let output = SessionOutputFrame { session_id, output: summary, displayed_at: output_at };
        events.push(TerminalEvent::OutputDisplayed {
            session_id,
            output_len: output.output.len(),
        });

        let duration = output_at.since(now);
        let end_code = LifecycleCode {
            device: self.device,
            session_id,
            kind: LifecycleKind::SessionEnd,
            timestamp: output_at,
            duration: Some(duration),
        };
        events.push(TerminalEvent::EndCodeDisplayed { session_id, duration });

        Ok(SessionRun {
            session_id,
            started_at: now,
            decrypted_at,
            output_at,
            duration,
            output,
            start_code,
            end_code,
            events,
            purge_verified,
        })
    }

    /// Kernel-level USB gate: a device enumerates only when its full
    /// (vendor, product, class) triple is whitelisted.
    pub fn usb_enumerate(&self, descriptor: UsbDescriptor) -> UsbOutcome {
        if self.usb_whitelist.contains(&descriptor) {
            UsbOutcome::Enumerated
        } else {
            UsbOutcome::Blocked
        }
    }
}
