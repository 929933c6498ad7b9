//! Inbound channel model: deployment configurations, carousel broadcast
//! scheduling, receiver endpoints, and the line-of-sight optical link.
//!
//! Unidirectionality is enforced at the type level. A hardware-enforced
//! endpoint has no send operation in its public surface at all; software
//! cannot call what does not exist. Policy-enforced endpoints expose a send
//! that fails while the outbound-blocking policy is intact, which is exactly
//! the conditional tier: the guarantee holds under correct operation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session_crypto::OpticalKeyFrame;
use crate::terminal::{LifecycleCode, SessionOutputFrame};
use crate::time::{SimDuration, SimTime};
use crate::wire::{DeviceId, SignedPacket};

/// Deployment configurations for the inbound channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    SatelliteBroadcast,
    TerrestrialBroadcast,
    RadioDatacast,
    HardwareDiode,
    ManagedIpOutboundDisabled,
    FiveGBroadcastProfile,
}

/// How receiver-side unidirectionality is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Enforcement {
    /// Transmit capability is physically absent (or blocked by a certified
    /// diode). Cannot be re-enabled by software on the receiver.
    Hardware,
    /// Transmit hardware exists; outbound is blocked by policy. Holds under
    /// correct operation only.
    Policy,
}

impl ChannelKind {
    /// Enforcement tier is a property of the configuration, fixed here so
    /// the invariant cannot be violated by construction.
    pub fn enforcement(self) -> Enforcement {
        match self {
            ChannelKind::SatelliteBroadcast
            | ChannelKind::TerrestrialBroadcast
            | ChannelKind::RadioDatacast
            | ChannelKind::HardwareDiode => Enforcement::Hardware,
            ChannelKind::ManagedIpOutboundDisabled | ChannelKind::FiveGBroadcastProfile => {
                Enforcement::Policy
            }
        }
    }
}

/// One inbound channel deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub throughput_bps: u64,
    /// Carousel repetition interval: queued content departs at each cycle
    /// boundary and is re-sent one cycle later if lost.
    pub cycle_period: SimDuration,
    /// Independent per-packet, per-cycle loss probability.
    pub loss_rate: f64,
    /// Policy tier only: whether the outbound-blocking policy is in effect.
    /// Hardware tiers carry `true` and never consult it.
    pub policy_intact: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelConfigError {
    #[error("loss rate must be in [0, 1)")]
    InvalidLossRate,
    #[error("throughput must be positive")]
    ZeroThroughput,
    #[error("cycle period must be positive")]
    ZeroCyclePeriod,
}

impl ChannelConfig {
    pub fn new(
        kind: ChannelKind,
        throughput_bps: u64,
        cycle_period: SimDuration,
        loss_rate: f64,
    ) -> Result<Self, ChannelConfigError> {
        if !(0.0..1.0).contains(&loss_rate) {
            return Err(ChannelConfigError::InvalidLossRate);
        }
        if throughput_bps == 0 {
            return Err(ChannelConfigError::ZeroThroughput);
        }
        if cycle_period == SimDuration::ZERO {
            return Err(ChannelConfigError::ZeroCyclePeriod);
        }
        Ok(ChannelConfig { kind, throughput_bps, cycle_period, loss_rate, policy_intact: true })
    }

    pub fn enforcement(&self) -> Enforcement {
        self.kind.enforcement()
    }
}

/// Scheduled delivery of one queued packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub packet_index: usize,
    /// When the first transmission attempt completes.
    pub first_attempt_at: SimTime,
    /// When the packet is actually received, after any lost cycles.
    pub delivered_at: SimTime,
    /// Carousel cycles lost to channel loss before delivery.
    pub lost_cycles: u32,
}

/// Assign delivery timestamps to a batch of packets departing at
/// `start_time`, in queue order.
///
/// Airtime accumulates content bytes over the configured rate; a packet's
/// first attempt completes when its cumulative bits have been transmitted.
/// A lost packet rides the next carousel cycle at the same offset,
/// repeatedly, until a cycle comes through clean - so every packet is
/// eventually delivered for any loss rate below one.
pub fn schedule_broadcast<R: Rng>(
    config: &ChannelConfig,
    packets: &[SignedPacket],
    start_time: SimTime,
    rng: &mut R,
) -> Vec<Delivery> {
    let mut deliveries = Vec::with_capacity(packets.len());
    let mut cumulative_bits: u128 = 0;
    for (packet_index, packet) in packets.iter().enumerate() {
        cumulative_bits += packet.airtime_bytes() as u128 * 8;
        let offset_us =
            (cumulative_bits * 1_000_000).div_ceil(config.throughput_bps as u128) as u64;
        let first_attempt_at = start_time + SimDuration::from_micros(offset_us);

        let mut lost_cycles = 0u32;
        if config.loss_rate > 0.0 {
            while rng.gen::<f64>() < config.loss_rate {
                lost_cycles += 1;
            }
        }
        let delivered_at =
            first_attempt_at + SimDuration::from_micros(lost_cycles as u64 * config.cycle_period.as_micros());
        deliveries.push(Delivery { packet_index, first_attempt_at, delivered_at, lost_cycles });
    }
    deliveries
}

/// Result of probing an endpoint for outbound capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutboundOutcome {
    /// No transmit path exists on the receiver; nothing was sent.
    StructurallyImpossible,
    /// Transmit hardware exists but the blocking policy refused the send.
    PolicyViolation,
    /// The send went out: policy tier with the policy broken.
    Sent,
}

/// Error returned by the policy-tier send operation while the policy holds.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("outbound traffic blocked by policy")]
pub struct PolicyViolation;

/// Receive side of a hardware-enforced inbound channel. There is no send
/// operation on this type; that absence is the enforcement.
#[derive(Debug)]
pub struct HardwareEndpoint {
    pub device: DeviceId,
    queue: Vec<Vec<u8>>,
}

/// Receive side of a policy-enforced inbound channel. The hardware can
/// transmit, so a send operation exists; it fails while the policy holds.
#[derive(Debug)]
pub struct PolicyEndpoint {
    pub device: DeviceId,
    pub policy_intact: bool,
    queue: Vec<Vec<u8>>,
}

impl PolicyEndpoint {
    /// Attempt an outbound send. Models the conditional tier: refused while
    /// the kernel/perimeter policy is intact, possible once it fails.
    pub fn try_send(&mut self, _bytes: &[u8]) -> Result<(), PolicyViolation> {
        if self.policy_intact {
            Err(PolicyViolation)
        } else {
            Ok(())
        }
    }
}

/// A terminal's inbound endpoint, tiered by enforcement.
#[derive(Debug)]
pub enum InboundEndpoint {
    Hardware(HardwareEndpoint),
    Policy(PolicyEndpoint),
}

impl InboundEndpoint {
    pub fn for_config(config: &ChannelConfig, device: DeviceId) -> Self {
        match config.enforcement() {
            Enforcement::Hardware => InboundEndpoint::Hardware(HardwareEndpoint { device, queue: Vec::new() }),
            Enforcement::Policy => InboundEndpoint::Policy(PolicyEndpoint {
                device,
                policy_intact: config.policy_intact,
                queue: Vec::new(),
            }),
        }
    }

    pub fn device(&self) -> DeviceId {
        match self {
            InboundEndpoint::Hardware(e) => e.device,
            InboundEndpoint::Policy(e) => e.device,
        }
    }

    pub fn enforcement(&self) -> Enforcement {
        match self {
            InboundEndpoint::Hardware(_) => Enforcement::Hardware,
            InboundEndpoint::Policy(_) => Enforcement::Policy,
        }
    }

    /// Queue a received frame.
    pub fn deliver(&mut self, frame: Vec<u8>) {
        match self {
            InboundEndpoint::Hardware(e) => e.queue.push(frame),
            InboundEndpoint::Policy(e) => e.queue.push(frame),
        }
    }

    /// Drain queued frames in arrival order.
    pub fn drain(&mut self) -> Vec<Vec<u8>> {
        match self {
            InboundEndpoint::Hardware(e) => std::mem::take(&mut e.queue),
            InboundEndpoint::Policy(e) => std::mem::take(&mut e.queue),
        }
    }

    pub fn set_policy_intact(&mut self, intact: bool) {
        if let InboundEndpoint::Policy(e) = self {
            e.policy_intact = intact;
        }
    }

    /// Analyzer-only probe. Not part of the terminal API: on hardware
    /// endpoints the outcome is the absence of the operation itself, and
    /// the analyzer needs to assert that absence mechanically.
    pub(crate) fn outbound_probe(&mut self) -> OutboundOutcome {
        match self {
            InboundEndpoint::Hardware(_) => OutboundOutcome::StructurallyImpossible,
            InboundEndpoint::Policy(e) => match e.try_send(&[]) {
                Err(PolicyViolation) => OutboundOutcome::PolicyViolation,
                Ok(()) => OutboundOutcome::Sent,
            },
        }
    }
}

/// Message types the optical link can carry. Nothing else fits through it,
/// and the link has no route to any network graph vertex.
#[derive(Debug)]
pub enum OpticalMessage {
    Key(OpticalKeyFrame),
    Output(SessionOutputFrame),
    Lifecycle(LifecycleCode),
}

/// Line-of-sight link between a terminal and its companion device.
#[derive(Debug, Clone, Copy)]
pub struct OpticalLink {
    pub line_of_sight: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no line of sight")]
pub struct NoLineOfSight;

/// Receipt for an optical delivery. Line-of-sight transfer is instantaneous
/// on the simulation clock.
#[derive(Debug)]
pub struct OpticalReceipt {
    pub delivered_at: SimTime,
    pub message: OpticalMessage,
}

pub fn deliver_optical(
    link: &OpticalLink,
    message: OpticalMessage,
    now: SimTime,
) -> Result<OpticalReceipt, NoLineOfSight> {
    if !link.line_of_sight {
        return Err(NoLineOfSight);
    }
    Ok(OpticalReceipt { delivered_at: now, message })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{sign_packet, PacketFields, PayloadType, SigningKeypair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn config(kind: ChannelKind, loss: f64) -> ChannelConfig {
        ChannelConfig::new(kind, 50_000_000, SimDuration::from_secs(300), loss).unwrap()
    }

    fn packets_of_sizes(sizes: &[usize]) -> Vec<SignedPacket> {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = SigningKeypair::generate(&mut rng);
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                sign_packet(
                    PacketFields {
                        payload_type: PayloadType::FirmwareChunk,
                        destination: DeviceId::BROADCAST,
                        sequence: i as u64 + 1,
                        ciphertext: vec![0xAB; n],
                    },
                    &key,
                )
            })
            .collect()
    }

    #[test]
    fn enforcement_tiers_by_kind() {
        for kind in [
            ChannelKind::SatelliteBroadcast,
            ChannelKind::TerrestrialBroadcast,
            ChannelKind::RadioDatacast,
            ChannelKind::HardwareDiode,
        ] {
            assert_eq!(kind.enforcement(), Enforcement::Hardware);
        }
        for kind in [ChannelKind::ManagedIpOutboundDisabled, ChannelKind::FiveGBroadcastProfile] {
            assert_eq!(kind.enforcement(), Enforcement::Policy);
        }
    }

    #[test]
    fn firmware_image_at_50mbps_takes_160s() {
        // 1 GB in thousand 1 MB chunks at 50 Mbps: 8e9 bits / 5e7 bps.
        let cfg = config(ChannelKind::SatelliteBroadcast, 0.0);
        let packets = packets_of_sizes(&vec![1_000_000; 1000]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let deliveries = schedule_broadcast(&cfg, &packets, SimTime::ZERO, &mut rng);
        let last = deliveries.last().unwrap();
        assert_eq!(last.delivered_at.as_micros(), 160_000_000);
        assert_eq!(last.lost_cycles, 0);
    }

    #[test]
    fn empty_queue_schedules_nothing() {
        let cfg = config(ChannelKind::SatelliteBroadcast, 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(schedule_broadcast(&cfg, &[], SimTime::ZERO, &mut rng).is_empty());
    }

    #[test]
    fn half_loss_means_two_cycles_on_average() {
        let cfg = config(ChannelKind::SatelliteBroadcast, 0.5);
        let packets = packets_of_sizes(&vec![100; 100]);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut total_cycles = 0u64;
        let trials = 1000;
        for _ in 0..trials {
            for d in schedule_broadcast(&cfg, &packets, SimTime::ZERO, &mut rng) {
                total_cycles += d.lost_cycles as u64 + 1;
            }
        }
        let mean = total_cycles as f64 / (trials as f64 * packets.len() as f64);
        assert!((mean - 2.0).abs() < 0.1, "mean delivery cycles {mean}");
    }

    #[test]
    fn lost_packets_ride_later_cycles() {
        let cfg = config(ChannelKind::SatelliteBroadcast, 0.9);
        let packets = packets_of_sizes(&[100]);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let d = schedule_broadcast(&cfg, &packets, SimTime::ZERO, &mut rng)[0];
        assert_eq!(
            d.delivered_at.as_micros(),
            d.first_attempt_at.as_micros() + d.lost_cycles as u64 * cfg.cycle_period.as_micros()
        );
    }

    #[test]
    fn hardware_endpoint_probe_is_structurally_impossible() {
        let cfg = config(ChannelKind::SatelliteBroadcast, 0.0);
        let mut ep = InboundEndpoint::for_config(&cfg, DeviceId::from_name("t"));
        assert_eq!(ep.outbound_probe(), OutboundOutcome::StructurallyImpossible);
    }

    #[test]
    fn policy_endpoint_blocks_until_policy_fails() {
        let cfg = config(ChannelKind::ManagedIpOutboundDisabled, 0.0);
        let mut ep = InboundEndpoint::for_config(&cfg, DeviceId::from_name("t"));
        assert_eq!(ep.outbound_probe(), OutboundOutcome::PolicyViolation);
        ep.set_policy_intact(false);
        assert_eq!(ep.outbound_probe(), OutboundOutcome::Sent);
    }

    #[test]
    fn optical_delivery_requires_line_of_sight() {
        let code = LifecycleCode {
            device: DeviceId::from_name("t"),
            session_id: crate::session_crypto::SessionId::from_bytes([1; 16]),
            kind: crate::trace::LifecycleKind::SessionStart,
            timestamp: SimTime::ZERO,
            duration: None,
        };
        let ok = deliver_optical(
            &OpticalLink { line_of_sight: true },
            OpticalMessage::Lifecycle(code),
            SimTime::from_micros(9),
        )
        .unwrap();
        assert_eq!(ok.delivered_at.as_micros(), 9);

        let code = LifecycleCode {
            device: DeviceId::from_name("t"),
            session_id: crate::session_crypto::SessionId::from_bytes([1; 16]),
            kind: crate::trace::LifecycleKind::SessionStart,
            timestamp: SimTime::ZERO,
            duration: None,
        };
        assert!(deliver_optical(
            &OpticalLink { line_of_sight: false },
            OpticalMessage::Lifecycle(code),
            SimTime::ZERO
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            ChannelConfig::new(ChannelKind::SatelliteBroadcast, 0, SimDuration::from_secs(1), 0.0),
            Err(ChannelConfigError::ZeroThroughput)
        );
        assert_eq!(
            ChannelConfig::new(ChannelKind::SatelliteBroadcast, 1, SimDuration::from_secs(1), 1.0),
            Err(ChannelConfigError::InvalidLossRate)
        );
        assert_eq!(
            ChannelConfig::new(ChannelKind::SatelliteBroadcast, 1, SimDuration::ZERO, 0.0),
            Err(ChannelConfigError::ZeroCyclePeriod)
        );
    }
}
