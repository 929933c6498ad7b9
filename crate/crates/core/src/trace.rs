//! Simulation event trace.
//!
//! Every observable action in a run is appended to a [`Trace`] with its
//! clock time, originating actor, channel class, and data-sensitivity tags.
//! The structural checks (unidirectionality, stage ordering, push-only
//! management, key confinement) are audits over this trace rather than
//! assertions sprinkled through the simulation.

use serde::Serialize;

use crate::session_crypto::SessionId;
use crate::time::{SimDuration, SimTime};
use crate::wire::{DeviceId, PayloadType, RejectReason};

/// Which kind of medium an event transited (or `Internal` for in-process
/// state changes that touch no medium at all).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChannelClass {
    Network,
    Optical,
    Physical,
    Internal,
}

/// Who originated an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "id")]
pub enum Actor {
    Backend,
    Terminal(DeviceId),
    Companion(u32),
    Operator,
}

/// Sensitivity of the data carried by an event. Used by the audits: no
/// network-class event may carry private key material or session plaintext.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DataTags {
    pub private_key: bool,
    pub plaintext: bool,
}

impl DataTags {
    pub const NONE: DataTags = DataTags { private_key: false, plaintext: false };
    pub const PRIVATE_KEY: DataTags = DataTags { private_key: true, plaintext: false };
    pub const PLAINTEXT: DataTags = DataTags { private_key: false, plaintext: true };
}

/// Session stages, in required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum SessionStage {
    /// Encrypted payload received over the inbound channel.
    PayloadReceipt = 1,
    /// Private key accepted from the optical frame.
    OpticalKey = 2,
    /// Payload decrypted and key purged.
    DecryptPurge = 3,
    /// Session output rendered to the optical channel.
    OpticalOutput = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LifecycleKind {
    SessionStart,
    SessionEnd,
}

/// What happened.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event")]
pub enum EventBody {
    BroadcastQueued { destination: DeviceId, payload_type: PayloadType, sequence: u64 },
    BroadcastDelivered { destination: DeviceId, payload_type: PayloadType, sequence: u64, attempt: u32 },
    BroadcastLost { destination: DeviceId, payload_type: PayloadType, sequence: u64, cycle: u32 },
    PacketRejected { reason: RejectReason },
    Stage { session_id: SessionId, stage: SessionStage },
    KeyMaterialHandoff { session_id: SessionId, companion: u32 },
    OpticalKeyPresented { session_id: SessionId },
    OpticalOutputDisplayed { session_id: SessionId, output_len: usize },
    LifecycleDisplayed { session_id: SessionId, kind: LifecycleKind },
    LifecycleRelayed { device: DeviceId, kind: LifecycleKind },
    LifecycleDropped { device: DeviceId, kind: LifecycleKind },
    SessionAborted { session_id: SessionId, reason: String },
    RevocationApplied,
    FirmwareApplied { version: u32 },
    RestartExecuted,
    DiagnosticDisplayed,
    OutboundAttempt { outcome: String },
    AnomalyFlagged { device: DeviceId, elapsed_us: u64, threshold_us: u64 },
    OperatorResponded { device: DeviceId, tier: String },
    PhysicalVisit { device: DeviceId },
    TerminalSwapped { device: DeviceId },
}

/// One trace record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub time: SimTime,
    pub actor: Actor,
    pub class: ChannelClass,
    pub tags: DataTags,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Analyzer-only annotation, kept apart from the event stream. Records
/// facts about adversary knowledge (key exposure through a compromised
/// companion) that are not transmission events.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub time: SimTime,
    pub companion: u32,
    pub session_id: SessionId,
    pub note: String,
}

/// Ordered event log for one simulation run.
#[derive(Debug, Default)]
pub struct Trace {
    events: Vec<TraceEvent>,
    annotations: Vec<Annotation>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, time: SimTime, actor: Actor, class: ChannelClass, tags: DataTags, body: EventBody) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { seq, time, actor, class, tags, body });
    }

    pub fn annotate(&mut self, annotation: Annotation) {
        self.annotations.push(annotation);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    /// Network-class events originated by any terminal. Under hardware
    /// enforcement this must be empty over every trace.
    pub fn terminal_network_events(&self) -> Vec<&TraceEvent> {
        self.events
            .iter()
            .filter(|e| e.class == ChannelClass::Network && matches!(e.actor, Actor::Terminal(_)))
            .collect()
    }

    /// Network-class events tagged as carrying private keys or plaintext.
    /// Must be empty over every trace, in every configuration.
    pub fn sensitive_network_events(&self) -> Vec<&TraceEvent> {
        self.events
            .iter()
            .filter(|e| e.class == ChannelClass::Network && (e.tags.private_key || e.tags.plaintext))
            .collect()
    }

    /// Backend-originated network events that did not transit the broadcast
    /// queue. Push-only management means there are none.
    pub fn backend_direct_network_events(&self) -> Vec<&TraceEvent> {
        self.events
            .iter()
            .filter(|e| {
                e.class == ChannelClass::Network
                    && e.actor == Actor::Backend
                    && !matches!(
                        e.body,
                        EventBody::BroadcastDelivered { .. } | EventBody::BroadcastLost { .. }
                    )
            })
            .collect()
    }

    /// Verify stage ordering for every session that reached stage 4:
    /// strictly increasing (time, seq) through stages 1-4, all present.
    /// Returns a human-readable violation list; empty means the invariant
    /// holds.
    pub fn stage_ordering_violations(&self) -> Vec<String> {
        use std::collections::BTreeMap;
        let mut per_session: BTreeMap<SessionId, Vec<(SessionStage, SimTime, u64)>> = BTreeMap::new();
        for e in &self.events {
            if let EventBody::Stage { session_id, stage } = e.body {
                per_session.entry(session_id).or_default().push((stage, e.time, e.seq));
            }
        }
        let mut violations = Vec::new();
        for (session, stages) in per_session {
            let completed = stages.iter().any(|(s, _, _)| *s == SessionStage::OpticalOutput);
            if !completed {
                continue;
            }
            let mut expected = [
                SessionStage::PayloadReceipt,
                SessionStage::OpticalKey,
                SessionStage::DecryptPurge,
                SessionStage::OpticalOutput,
            ]
            .into_iter();
            let mut prev: Option<(SimTime, u64)> = None;
            for (stage, time, seq) in &stages {
                match expected.next() {
                    Some(want) if want == *stage => {}
                    _ => {
                        violations.push(format!("session {session}: unexpected stage {stage:?}"));
                        break;
                    }
                }
                if let Some((pt, ps)) = prev {
                    if (*time, *seq) <= (pt, ps) {
                        violations.push(format!("session {session}: stage {stage:?} not ordered"));
                    }
                }
                prev = Some((*time, *seq));
            }
            if expected.next().is_some() {
                violations.push(format!("session {session}: missing stages"));
            }
        }
        violations
    }

    /// Count of completed sessions (stage 4 reached).
    pub fn completed_sessions(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.body, EventBody::Stage { stage: SessionStage::OpticalOutput, .. }))
            .count()
    }
}

/// Duration attached to lifecycle end signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SessionSpan {
    pub started_at: SimTime,
    pub duration: SimDuration,
}
