//! Slotted, retransmission-free, contention-based multi-link uplink and
//! reliable downlink broadcast.
//!
//! Every transmitting AGV sends identical copies of its packet on S of the
//! C orthogonal channels; a copy survives when no other transmitter chose
//! its channel and no independent per-link error struck it, and a packet is
//! delivered when at least one copy survives. No acknowledgment or
//! retransmission state exists anywhere.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agv::AgvId;
use crate::timing::Slot;

/// Contention parameters. The per-slot transmit probability is 1/interval,
/// so an AGV sends one packet per interval on average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Available orthogonal channels C (at most 64).
    pub channels: u32,
    /// Channels selected per packet S.
    pub selected: u32,
    /// Mean communication interval D in slots.
    pub interval: u32,
    /// Independent per-link error probability sigma.
    pub error_prob: f64,
    /// Ideal-resources switch: deliver every attempt regardless of
    /// contention or errors. The ideal mode behaves as the realistic one
    /// with this set.
    pub guaranteed: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            channels: 60,
            selected: 1,
            interval: 1,
            error_prob: 0.0,
            guaranteed: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("channel config field {field} out of range: {detail}")]
    InvalidConfig {
        field: &'static str,
        detail: String,
    },
    #[error("malformed channel set for {agv}: {detail}")]
    MalformedChannelSet { agv: AgvId, detail: String },
}

impl ChannelConfig {
    pub fn transmit_prob(&self) -> f64 {
        1.0 / f64::from(self.interval)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let err = |field: &'static str, detail: String| {
            Err(ChannelError::InvalidConfig { field, detail })
        };
        if self.channels < 1 || self.channels > 64 {
            return err("channels", format!("{} not in 1..=64", self.channels));
        }
        if self.selected < 1 || self.selected > self.channels {
            return err(
                "selected",
                format!("{} not in 1..={}", self.selected, self.channels),
            );
        }
        if self.interval < 1 {
            return err("interval", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.error_prob) {
            return err("error_prob", format!("{} not in [0,1)", self.error_prob));
        }
        Ok(())
    }
}

/// Traffic classes exchanged between AGVs and the edge server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    /// AGV position report (uplink).
    State,
    /// Planned navigation route (uplink).
    Route,
    /// Global congestion map broadcast (downlink).
    GlobalMap,
    /// Task route delivery after reassignment (downlink).
    TaskRoute,
}

impl PacketKind {
    pub fn is_uplink(self) -> bool {
        matches!(self, PacketKind::State | PacketKind::Route)
    }

    /// Nominal payload size in bytes. Carried as metadata only: each
    /// channel accommodates one packet per slot regardless of size.
    pub fn size_bytes(self) -> u32 {
        match self {
            PacketKind::State => 16,
            PacketKind::Route => 256,
            PacketKind::GlobalMap => 1024,
            PacketKind::TaskRoute => 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub kind: PacketKind,
    /// Sender: AGV id for uplink, the edge server for downlink.
    pub src: u32,
    pub created_at: Slot,
    pub size: u32,
}

impl Packet {
    pub fn new(kind: PacketKind, src: u32, created_at: Slot) -> Self {
        Packet {
            kind,
            src,
            created_at,
            size: kind.size_bytes(),
        }
    }
}

/// An S-subset of the C channels, as a bitmask (hence the C <= 64 cap).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSet(pub u64);

impl ChannelSet {
    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn contains(self, channel: u32) -> bool {
        self.0 & (1 << channel) != 0
    }
}

/// Sample S distinct channels uniformly from 0..C.
pub fn sample_channel_set(channels: u32, selected: u32, rng: &mut impl Rng) -> ChannelSet {
    debug_assert!(selected >= 1 && selected <= channels && channels <= 64);
    if selected == channels {
        return ChannelSet(if channels == 64 {
            u64::MAX
        } else {
            (1u64 << channels) - 1
        });
    }
    // Rejection sampling; flip to sampling the complement when S is large.
    let invert = selected > channels / 2;
    let draws = if invert { channels - selected } else { selected };
    let mut mask = 0u64;
    let mut remaining = draws;
    while remaining > 0 {
        let bit = 1u64 << rng.gen_range(0..channels);
        if mask & bit == 0 {
            mask |= bit;
            remaining -= 1;
        }
    }
    if invert {
        let full = if channels == 64 {
            u64::MAX
        } else {
            (1u64 << channels) - 1
        };
        ChannelSet(full & !mask)
    } else {
        ChannelSet(mask)
    }
}

/// One AGV's transmission in a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UplinkAttempt {
    pub agv: AgvId,
    pub channels: ChannelSet,
}

/// Per-slot delivery results.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotOutcome {
    pub attempted: Vec<AgvId>,
    pub delivered: Vec<AgvId>,
    pub chosen: Vec<(AgvId, ChannelSet)>,
}

/// Resolve one slot of contention. A copy survives iff its channel was
/// chosen by no other transmitter and the independent per-link error did
/// not strike it; an AGV is delivered iff at least one copy survives.
pub fn simulate_slot(
    attempts: &[UplinkAttempt],
    config: &ChannelConfig,
    rng: &mut impl Rng,
) -> Result<SlotOutcome, ChannelError> {
    let full = if config.channels == 64 {
        u64::MAX
    } else {
        (1u64 << config.channels) - 1
    };
    let mut once = 0u64;
    let mut twice = 0u64;
    for a in attempts {
        let bits = a.channels.0;
        if a.channels.count() != config.selected || bits & !full != 0 {
            return Err(ChannelError::MalformedChannelSet {
                agv: a.agv,
                detail: format!(
                    "expected {} channels below {}, got {:#x}",
                    config.selected, config.channels, bits
                ),
            });
        }
        twice |= once & bits;
        once |= bits;
    }

    let mut outcome = SlotOutcome {
        attempted: Vec::with_capacity(attempts.len()),
        delivered: Vec::new(),
        chosen: Vec::with_capacity(attempts.len()),
    };
    for a in attempts {
        outcome.attempted.push(a.agv);
        outcome.chosen.push((a.agv, a.channels));
        let mut surviving = a.channels.0 & !twice;
        let mut delivered = false;
        while surviving != 0 {
            surviving &= surviving - 1;
            if config.error_prob == 0.0 || rng.gen::<f64>() >= config.error_prob {
                delivered = true;
                break;
            }
        }
        if delivered {
            outcome.delivered.push(a.agv);
        }
    }
    Ok(outcome)
}

/// How uplink attempts are spread over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficMode {
    /// Each AGV attempts independently each slot with probability 1/D,
    /// matching the analytic model.
    Bernoulli,
    /// Each AGV attempts every D slots at a fixed per-AGV phase.
    Periodic,
}

/// Decide which AGVs attempt an uplink this slot. State and route bodies
/// are bundled into one report per attempt.
pub fn schedule_traffic(
    agvs: &[AgvId],
    slot: Slot,
    config: &ChannelConfig,
    mode: TrafficMode,
    rng: &mut impl Rng,
) -> Vec<AgvId> {
    let d = u64::from(config.interval);
    match mode {
        TrafficMode::Bernoulli => {
            let p = config.transmit_prob();
            agvs.iter()
                .copied()
                .filter(|_| rng.gen::<f64>() < p)
                .collect()
        }
        TrafficMode::Periodic => agvs
            .iter()
            .copied()
            .filter(|a| slot % d == u64::from(a.0) % d)
            .collect(),
    }
}

/// Downlink broadcast: reliable, contention-free delivery to every
/// recipient. Returns the delivered set (deduplicated, sorted).
pub fn broadcast_downlink(packet: &Packet, recipients: &[AgvId]) -> Vec<AgvId> {
    debug_assert!(!packet.kind.is_uplink(), "broadcast of an uplink packet");
    let mut delivered: Vec<AgvId> = recipients.to_vec();
    delivered.sort();
    delivered.dedup();
    delivered
}

/// Uplink success probability: the chance a given AGV transmits in a slot
/// and at least one of its S copies escapes collision, by inclusion-
/// exclusion over its channel choices (collision-only; errors excluded).
///
/// The alternating binomial sum is evaluated in floating point; it is
/// numerically exact for the small S used by factory configurations but
/// degrades for S beyond a few dozen.
pub fn p_success_analytic(k: u32, config: &ChannelConfig) -> f64 {
    assert!(k >= 1, "need at least one AGV");
    let p_t = config.transmit_prob();
    let c = config.channels;
    let s = config.selected;
    let mut sum = 0.0;
    let mut compensation = 0.0;
    for i in 1..=s {
        // binom(C-i, S) / binom(C, S) as a stable product.
        let mut ratio = 1.0;
        for j in 0..s {
            let denom = f64::from(c - j);
            let numer = f64::from(c.saturating_sub(i + j));
            ratio *= numer.max(0.0) / denom;
        }
        let bracket = (1.0 - p_t) + p_t * ratio;
        let term = sign(i + 1) * binomial(s, i) * p_t * bracket.powi(k as i32 - 1);
        // Neumaier compensated summation.
        let t = sum + term;
        compensation += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
    }
    sum + compensation
}

/// Expected successfully delivered packets per slot across K AGVs.
pub fn throughput_analytic(k: u32, config: &ChannelConfig) -> f64 {
    f64::from(k) * p_success_analytic(k, config)
}

fn sign(i: u32) -> f64 {
    if i % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for j in 0..k {
        acc = acc * f64::from(n - j) / f64::from(j + 1);
    }
    acc.round()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(c: u32, s: u32, d: u32) -> ChannelConfig {
        ChannelConfig {
            channels: c,
            selected: s,
            interval: d,
            error_prob: 0.0,
            guaranteed: false,
        }
    }

    #[test]
    fn no_contention_is_transmit_prob() {
        for (c, s, d) in [(1, 1, 1), (4, 2, 2), (60, 4, 10), (8, 8, 3)] {
            let config = cfg(c, s, d);
            let p = p_success_analytic(1, &config);
            assert!(
                (p - config.transmit_prob()).abs() < 1e-12,
                "K=1 must reduce to P_t, got {p}"
            );
        }
    }

    #[test]
    fn full_band_overlap_closed_form() {
        for k in [2u32, 3, 7, 25] {
            for (c, d) in [(1, 1), (4, 2), (8, 5)] {
                let config = cfg(c, c, d);
                let p_t = config.transmit_prob();
                let expected = p_t * (1.0 - p_t).powi(k as i32 - 1);
                let got = p_success_analytic(k, &config);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "S=C closed form: got {got}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn throughput_is_k_times_success() {
        let config = cfg(60, 2, 2);
        for k in [1u32, 5, 72] {
            let p = p_success_analytic(k, &config);
            assert_eq!(throughput_analytic(k, &config), f64::from(k) * p);
        }
        let single = cfg(1, 1, 2);
        assert!((throughput_analytic(1, &single) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_agvs_one_channel_always_transmitting() {
        // Both transmit every slot on the same single channel: the channel
        // pair enumeration gives zero per-AGV success, so throughput with
        // C=2, S=1, P_t=1 is 2 * 1 * (1/2) = 1.0.
        let config = cfg(2, 1, 1);
        assert!((throughput_analytic(2, &config) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn success_bounded_by_transmit_prob() {
        for k in [1u32, 2, 10, 100] {
            for c in [1u32, 4, 60] {
                for s in [1u32, 2, 4] {
                    if s > c {
                        continue;
                    }
                    for d in [1u32, 2, 10] {
                        let config = cfg(c, s, d);
                        let p = p_success_analytic(k, &config);
                        assert!(
                            (-1e-12..=config.transmit_prob() + 1e-12).contains(&p),
                            "p={p} out of range at K={k} C={c} S={s} D={d}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_transmitter_delivered() {
        let config = cfg(4, 2, 1);
        let mut rng = rng::stream(1, "net");
        let set = sample_channel_set(4, 2, &mut rng);
        let out = simulate_slot(
            &[UplinkAttempt {
                agv: AgvId(0),
                channels: set,
            }],
            &config,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.delivered, vec![AgvId(0)]);
    }

    #[test]
    fn identical_sets_collide_entirely() {
        let config = cfg(8, 3, 1);
        let mut rng = rng::stream(2, "net");
        let set = sample_channel_set(8, 3, &mut rng);
        let attempts = [
            UplinkAttempt {
                agv: AgvId(0),
                channels: set,
            },
            UplinkAttempt {
                agv: AgvId(1),
                channels: set,
            },
        ];
        let out = simulate_slot(&attempts, &config, &mut rng).unwrap();
        assert!(out.delivered.is_empty());
        assert_eq!(out.attempted, vec![AgvId(0), AgvId(1)]);
    }

    #[test]
    fn partial_overlap_survives() {
        let config = cfg(4, 2, 1);
        let mut rng = rng::stream(3, "net");
        let attempts = [
            UplinkAttempt {
                agv: AgvId(0),
                channels: ChannelSet(0b0011),
            },
            UplinkAttempt {
                agv: AgvId(1),
                channels: ChannelSet(0b0110),
            },
            UplinkAttempt {
                agv: AgvId(2),
                channels: ChannelSet(0b1100),
            },
        ];
        let out = simulate_slot(&attempts, &config, &mut rng).unwrap();
        // Channels 1, 2 collide; agv0 survives on 0, agv2 on 3, agv1 loses
        // both of its copies.
        assert_eq!(out.delivered, vec![AgvId(0), AgvId(2)]);
    }

    #[test]
    fn malformed_set_rejected() {
        let config = cfg(4, 2, 1);
        let mut rng = rng::stream(4, "net");
        let bad = [UplinkAttempt {
            agv: AgvId(7),
            channels: ChannelSet(0b1),
        }];
        assert!(matches!(
            simulate_slot(&bad, &config, &mut rng),
            Err(ChannelError::MalformedChannelSet { .. })
        ));
        let out_of_band = [UplinkAttempt {
            agv: AgvId(7),
            channels: ChannelSet(0b11 << 10),
        }];
        assert!(matches!(
            simulate_slot(&out_of_band, &config, &mut rng),
            Err(ChannelError::MalformedChannelSet { .. })
        ));
    }

    #[test]
    fn monte_carlo_matches_analytic_spot() {
        // K=5, C=4, S=2, P_t=0.5 over 2e5 slots within 4 standard errors.
        let config = cfg(4, 2, 2);
        let k = 5u32;
        let agvs: Vec<AgvId> = (0..k).map(AgvId).collect();
        let mut rng = rng::stream(5, "net-mc");
        let slots = 200_000u64;
        let (mut sum, mut sum_sq) = (0f64, 0f64);
        let mut attempts = Vec::new();
        for slot in 0..slots {
            attempts.clear();
            for &a in &schedule_traffic(&agvs, slot, &config, TrafficMode::Bernoulli, &mut rng) {
                attempts.push(UplinkAttempt {
                    agv: a,
                    channels: sample_channel_set(4, 2, &mut rng),
                });
            }
            let out = simulate_slot(&attempts, &config, &mut rng).unwrap();
            let d = out.delivered.len() as f64;
            sum += d;
            sum_sq += d * d;
        }
        let n = slots as f64;
        let p_hat = sum / (n * f64::from(k));
        let var = (sum_sq - sum * sum / n) / (n - 1.0);
        let se = (var / n).sqrt() / f64::from(k);
        let p = p_success_analytic(k, &config);
        assert!(
            (p_hat - p).abs() <= 4.0 * se,
            "MC {p_hat} vs analytic {p} (se {se})"
        );
    }

    #[test]
    fn errors_only_reduce_delivery() {
        let clean = cfg(4, 2, 2);
        let noisy = ChannelConfig {
            error_prob: 0.4,
            ..clean
        };
        let agvs: Vec<AgvId> = (0..6).map(AgvId).collect();
        let mut count = |config: &ChannelConfig, tag: &str| {
            let mut rng = rng::stream(6, tag);
            let mut delivered = 0u64;
            let mut attempts = Vec::new();
            for slot in 0..50_000u64 {
                attempts.clear();
                for &a in &schedule_traffic(&agvs, slot, config, TrafficMode::Bernoulli, &mut rng)
                {
                    attempts.push(UplinkAttempt {
                        agv: a,
                        channels: sample_channel_set(4, 2, &mut rng),
                    });
                }
                delivered += simulate_slot(&attempts, config, &mut rng).unwrap().delivered.len()
                    as u64;
            }
            delivered
        };
        let base = count(&clean, "err-a");
        let with_errors = count(&noisy, "err-a");
        assert!(with_errors < base);
    }

    #[test]
    fn bernoulli_attempt_rate() {
        let config = cfg(1, 1, 2);
        let agvs = [AgvId(0)];
        let mut rng = rng::stream(7, "net-traffic");
        let mut attempts = 0u64;
        let slots = 100_000u64;
        for slot in 0..slots {
            attempts +=
                schedule_traffic(&agvs, slot, &config, TrafficMode::Bernoulli, &mut rng).len()
                    as u64;
        }
        let fraction = attempts as f64 / slots as f64;
        assert!((fraction - 0.5).abs() < 0.01, "fraction {fraction}");
    }

    #[test]
    fn d_of_one_attempts_every_slot() {
        let config = cfg(2, 1, 1);
        let agvs: Vec<AgvId> = (0..7).map(AgvId).collect();
        let mut rng = rng::stream(8, "net-traffic");
        for slot in 0..32 {
            let out = schedule_traffic(&agvs, slot, &config, TrafficMode::Bernoulli, &mut rng);
            assert_eq!(out.len(), 7);
        }
    }

    #[test]
    fn periodic_attempt_count() {
        let config = cfg(1, 1, 25);
        let agvs = [AgvId(3)];
        let mut rng = rng::stream(9, "net-traffic");
        let total_slots = 1000u64;
        let mut attempts = 0u64;
        for slot in 0..total_slots {
            attempts +=
                schedule_traffic(&agvs, slot, &config, TrafficMode::Periodic, &mut rng).len()
                    as u64;
        }
        assert!((39..=41).contains(&attempts), "got {attempts}");
    }

    #[test]
    fn downlink_reaches_everyone() {
        let map = Packet::new(PacketKind::GlobalMap, u32::MAX, 10);
        let recipients: Vec<AgvId> = (0..60).map(AgvId).collect();
        assert_eq!(broadcast_downlink(&map, &recipients).len(), 60);
        assert!(broadcast_downlink(&map, &[]).is_empty());
        // Idempotent set semantics.
        let dup = [AgvId(1), AgvId(1), AgvId(0)];
        assert_eq!(broadcast_downlink(&map, &dup), vec![AgvId(0), AgvId(1)]);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = ChannelConfig {
            channels: 70,
            ..ChannelConfig::default()
        };
        match bad.validate() {
            Err(ChannelError::InvalidConfig { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("expected invalid config, got {other:?}"),
        }
        let bad = ChannelConfig {
            selected: 5,
            channels: 4,
            ..ChannelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
