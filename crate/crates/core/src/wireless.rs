//! One game-step of a slotted p-CSMA broadcast medium.
//!
//! Received power follows the log-distance path-loss model with log-normal
//! fading and a fixed attenuation per obstacle crossed. Each agent with a
//! packet to send draws a backoff counter, senses the medium when it expires,
//! and transmits with the contention probability if the medium is free.
//! Every receiver then arbitrates each packet by its SINR against the
//! concurrent transmissions it can hear.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crossed_obstacles, Obstacle, Pos};

/// Radio constants. Powers in dBm, gains and thresholds in dB, distances in
/// grid units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub p_t_dbm: f64,
    pub k_ref_db: f64,
    pub d0: f64,
    pub eta: f64,
    pub sigma_psi_db: f64,
    pub noise_dbm: f64,
    pub theta_f_dbm: f64,
    pub theta_r_db: f64,
    pub obstacle_atten_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            p_t_dbm: 20.0,
            k_ref_db: 40.0,
            d0: 1.0,
            eta: 3.0,
            sigma_psi_db: 2.0,
            noise_dbm: -95.0,
            theta_f_dbm: -78.0,
            theta_r_db: 15.0,
            obstacle_atten_db: 4.5,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.p_t_dbm,
            self.k_ref_db,
            self.d0,
            self.eta,
            self.sigma_psi_db,
            self.noise_dbm,
            self.theta_f_dbm,
            self.obstacle_atten_db,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("channel parameters must be finite".into()));
        }
        if self.theta_r_db.is_nan() {
            return Err(Error::Config("channel.theta_r_db must not be NaN".into()));
        }
        if self.d0 <= 0.0 {
            return Err(Error::Config(format!("channel.d0 must be > 0, got {}", self.d0)));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("channel.eta must be > 0, got {}", self.eta)));
        }
        if self.sigma_psi_db < 0.0 {
            return Err(Error::Config("channel.sigma_psi_db must be >= 0".into()));
        }
        if self.p_t_dbm - self.k_ref_db <= self.theta_f_dbm {
            return Err(Error::Config(format!(
                "power at reference distance ({} dBm) does not exceed the sensing threshold ({} dBm)",
                self.p_t_dbm - self.k_ref_db,
                self.theta_f_dbm
            )));
        }
        Ok(())
    }
}

/// Medium access parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacConfig {
    /// Probability of transmitting when the counter expires on a free medium.
    pub contention_prob: f64,
    /// Backoff counters are drawn uniformly from `1..=counter_window`.
    pub counter_window: u32,
    /// Slots available in one game step.
    pub slots_per_step: u32,
    /// Airtime of one packet, in slots. Packets running past the end of the
    /// step are cut at the step boundary.
    pub packet_slots: u32,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self {
            contention_prob: 0.3,
            counter_window: 15,
            slots_per_step: 15,
            packet_slots: 2,
        }
    }
}

impl MacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.contention_prob) {
            return Err(Error::Config(format!(
                "channel.mac.contention_prob must lie in [0, 1], got {}",
                self.contention_prob
            )));
        }
        if self.counter_window < 1 {
            return Err(Error::Config("channel.mac.counter_window must be >= 1".into()));
        }
        if self.slots_per_step < 1 {
            return Err(Error::Config("channel.mac.slots_per_step must be >= 1".into()));
        }
        if self.packet_slots < 1 {
            return Err(Error::Config("channel.mac.packet_slots must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub sender: usize,
    pub payload: Vec<f64>,
    pub tx_power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReceptionOutcome {
    Received {
        payload: Vec<f64>,
        rss_dbm: f64,
        sender: usize,
    },
    SensedOnly {
        rss_dbm: f64,
    },
    Undetected,
}

/// Payload-free form of [`ReceptionOutcome`], as returned by [`arbitrate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Received,
    SensedOnly,
    Undetected,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Received => "received",
            OutcomeKind::SensedOnly => "sensed",
            OutcomeKind::Undetected => "undetected",
        }
    }
}

impl ReceptionOutcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            ReceptionOutcome::Received { .. } => OutcomeKind::Received,
            ReceptionOutcome::SensedOnly { .. } => OutcomeKind::SensedOnly,
            ReceptionOutcome::Undetected => OutcomeKind::Undetected,
        }
    }
}

/// The fate of one packet at one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketReception {
    /// Slot in which the packet started.
    pub slot: u32,
    pub sender: usize,
    pub rss_dbm: f64,
    pub outcome: ReceptionOutcome,
}

/// Everything that happened on the medium during one game step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepRadioLog {
    pub slots: u32,
    /// Per receiver, every packet that reached it, ordered by (slot, sender).
    pub receptions: Vec<Vec<PacketReception>>,
    /// Per sender, the receivers that decoded its packet.
    pub acks: Vec<BTreeSet<usize>>,
    /// Agent wanted to send this step.
    pub intended: Vec<bool>,
    /// Agent actually put a packet on the air.
    pub transmitted: Vec<bool>,
    /// Agent wanted to send but its counter never led to a transmission.
    pub dropped: Vec<bool>,
    /// Per agent, number of slots in which the power it sensed from other
    /// transmitters reached the sensing threshold.
    pub busy_slots: Vec<u32>,
}

impl StepRadioLog {
    pub fn empty(n_agents: usize, slots: u32) -> Self {
        Self {
            slots,
            receptions: vec![Vec::new(); n_agents],
            acks: vec![BTreeSet::new(); n_agents],
            intended: vec![false; n_agents],
            transmitted: vec![false; n_agents],
            dropped: vec![false; n_agents],
            busy_slots: vec![0; n_agents],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.receptions.len()
    }

    /// Decoded packets at `receiver`, in arrival order.
    pub fn received_by(&self, receiver: usize) -> impl Iterator<Item = &PacketReception> {
        self.receptions[receiver]
            .iter()
            .filter(|r| matches!(r.outcome, ReceptionOutcome::Received { .. }))
    }

    /// One tab-separated record per packet per receiver:
    /// `step slot sender receiver rss_dbm outcome`.
    pub fn trace_lines(&self, step: usize) -> String {
        let mut out = String::new();
        for (receiver, recs) in self.receptions.iter().enumerate() {
            for r in recs {
                let _ = writeln!(
                    out,
                    "{step}\t{}\t{}\t{receiver}\t{:.4}\t{}",
                    r.slot,
                    r.sender,
                    r.rss_dbm,
                    r.outcome.kind().as_str()
                );
            }
        }
        out
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

fn path_loss_rss(
    tx_power_dbm: f64,
    sender: Pos,
    receiver: Pos,
    obstacles: &[Obstacle],
    params: &ChannelParams,
    fading_draw: f64,
) -> f64 {
    let d = sender.distance(receiver).max(params.d0);
    let atten: f64 = crossed_obstacles(sender, receiver, obstacles)
        .map(|o| o.atten_db)
        .sum();
    tx_power_dbm - params.k_ref_db - 10.0 * params.eta * (d / params.d0).log10() + fading_draw - atten
}

/// Received signal strength in dBm. Distances below `d0` are clamped to `d0`;
/// each obstacle crossed subtracts its own attenuation once.
pub fn compute_rss(
    sender: Pos,
    receiver: Pos,
    obstacles: &[Obstacle],
    params: &ChannelParams,
    fading_draw: f64,
) -> f64 {
    path_loss_rss(params.p_t_dbm, sender, receiver, obstacles, params, fading_draw)
}

/// Classify a packet by its strength and the interference present.
/// Ties pass: `signal == theta_f` is detected and `SINR == theta_r` decodes.
pub fn arbitrate(signal_dbm: f64, interference_dbm: Option<f64>, params: &ChannelParams) -> OutcomeKind {
    if signal_dbm < params.theta_f_dbm {
        return OutcomeKind::Undetected;
    }
    let sinr = match interference_dbm {
        None => signal_dbm - params.noise_dbm,
        Some(i) => signal_dbm - mw_to_dbm(dbm_to_mw(i) + dbm_to_mw(params.noise_dbm)),
    };
    if sinr >= params.theta_r_db {
        OutcomeKind::Received
    } else {
        OutcomeKind::SensedOnly
    }
}

struct Transmission {
    sender: usize,
    start: u32,
    end: u32,
    /// Faded RSS at every agent; NaN at the sender itself.
    rss: Vec<f64>,
    payload: Vec<f64>,
}

impl Transmission {
    fn active(&self, slot: u32) -> bool {
        self.start <= slot && slot < self.end
    }

    fn overlaps(&self, other: &Transmission) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Simulate the medium for one game step. `intents[i]` is agent `i`'s packet,
/// if it wants to send; positions and intents are indexed by agent id.
/// An agent whose backoff never ends in a transmission within the step has
/// its intent dropped (reported in [`StepRadioLog::dropped`]).
pub fn run_mac_step<R: Rng + ?Sized>(
    intents: &[Option<Packet>],
    positions: &[Pos],
    obstacles: &[Obstacle],
    params: &ChannelParams,
    mac: &MacConfig,
    rng: &mut R,
) -> StepRadioLog {
    let n = positions.len();
    assert_eq!(intents.len(), n, "intents and positions must cover the same agents");
    let slots = mac.slots_per_step;
    let mut log = StepRadioLog::empty(n, slots);
    if intents.iter().all(Option::is_none) {
        return log;
    }

    let fading = Normal::new(0.0, params.sigma_psi_db).expect("sigma_psi_db validated >= 0");
    let mut counters: Vec<Option<u32>> = intents
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.as_ref().map(|_| {
                log.intended[i] = true;
                rng.gen_range(1..=mac.counter_window)
            })
        })
        .collect();
    let mut txs: Vec<Transmission> = Vec::new();

    for slot in 0..slots {
        let mut starters = Vec::new();
        for i in 0..n {
            let Some(c) = counters[i] else { continue };
            if c > 1 {
                counters[i] = Some(c - 1);
                continue;
            }
            // counter expired: sense transmissions already on the air
            let sensed_mw: f64 = txs
                .iter()
                .filter(|t| t.active(slot) && t.sender != i)
                .map(|t| dbm_to_mw(t.rss[i]))
                .sum();
            let free = sensed_mw == 0.0 || mw_to_dbm(sensed_mw) < params.theta_f_dbm;
            if free && rng.gen::<f64>() < mac.contention_prob {
                counters[i] = None;
                starters.push(i);
            } else {
                counters[i] = Some(rng.gen_range(1..=mac.counter_window));
            }
        }
        for i in starters {
            let packet = intents[i].as_ref().expect("starter has an intent");
            let rss = (0..n)
                .map(|r| {
                    if r == i {
                        f64::NAN
                    } else {
                        let psi = if params.sigma_psi_db > 0.0 { fading.sample(rng) } else { 0.0 };
                        path_loss_rss(packet.tx_power_dbm, positions[i], positions[r], obstacles, params, psi)
                    }
                })
                .collect();
            log.transmitted[i] = true;
            txs.push(Transmission {
                sender: i,
                start: slot,
                end: (slot + mac.packet_slots).min(slots),
                rss,
                payload: packet.payload.clone(),
            });
        }
    }

    for i in 0..n {
        log.dropped[i] = log.intended[i] && !log.transmitted[i];
    }

    for slot in 0..slots {
        for (agent, busy) in log.busy_slots.iter_mut().enumerate() {
            let mw: f64 = txs
                .iter()
                .filter(|t| t.active(slot) && t.sender != agent)
                .map(|t| dbm_to_mw(t.rss[agent]))
                .sum();
            if mw > 0.0 && mw_to_dbm(mw) >= params.theta_f_dbm {
                *busy += 1;
            }
        }
    }

    // txs is already ordered by (start slot, sender)
    for tx in &txs {
        for r in 0..n {
            if r == tx.sender {
                continue;
            }
            let signal = tx.rss[r];
            let mut kind = if signal < params.theta_f_dbm {
                OutcomeKind::Undetected
            } else {
                let worst_mw = (tx.start..tx.end)
                    .map(|slot| {
                        txs.iter()
                            .filter(|o| {
                                o.sender != tx.sender
                                    && o.sender != r
                                    && o.active(slot)
                                    && o.rss[r] >= params.theta_f_dbm
                            })
                            .map(|o| dbm_to_mw(o.rss[r]))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max);
                let interference = (worst_mw > 0.0).then(|| mw_to_dbm(worst_mw));
                arbitrate(signal, interference, params)
            };
            // half duplex: a receiver on the air cannot decode
            let receiver_busy = txs.iter().any(|o| o.sender == r && o.overlaps(tx));
            if receiver_busy && kind == OutcomeKind::Received {
                kind = OutcomeKind::SensedOnly;
            }
            let outcome = match kind {
                OutcomeKind::Received => {
                    log.acks[tx.sender].insert(r);
                    ReceptionOutcome::Received {
                        payload: tx.payload.clone(),
                        rss_dbm: signal,
                        sender: tx.sender,
                    }
                }
                OutcomeKind::SensedOnly => ReceptionOutcome::SensedOnly { rss_dbm: signal },
                OutcomeKind::Undetected => ReceptionOutcome::Undetected,
            };
            log.receptions[r].push(PacketReception {
                slot: tx.start,
                sender: tx.sender,
                rss_dbm: signal,
                outcome,
            });
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Orientation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn packet(sender: usize) -> Option<Packet> {
        Some(Packet {
            sender,
            payload: vec![sender as f64],
            tx_power_dbm: ChannelParams::default().p_t_dbm,
        })
    }

    #[test]
    fn rss_reference_distance_identity() {
        let p = ChannelParams::default();
        let rss = compute_rss(Pos::new(0, 0), Pos::new(1, 0), &[], &p, 0.0);
        assert_eq!(rss, p.p_t_dbm - p.k_ref_db);
    }

    #[test]
    fn rss_colocated_clamps_to_d0() {
        let p = ChannelParams::default();
        assert_eq!(compute_rss(Pos::new(3, 3), Pos::new(3, 3), &[], &p, 0.0), -20.0);
    }

    #[test]
    fn rss_ten_d0_and_one_obstacle() {
        let p = ChannelParams {
            p_t_dbm: 20.0,
            k_ref_db: 40.0,
            eta: 3.0,
            ..Default::default()
        };
        assert_eq!(compute_rss(Pos::new(0, 0), Pos::new(10, 0), &[], &p, 0.0), -50.0);
        let wall = Obstacle::new(Pos::new(5, 0), Orientation::Vertical, 3, 4.5);
        assert_eq!(compute_rss(Pos::new(0, 0), Pos::new(10, 0), &[wall], &p, 0.0), -54.5);
    }

    #[test]
    fn arbitrate_examples() {
        let p = ChannelParams::default();
        assert_eq!(arbitrate(-60.0, None, &p), OutcomeKind::Received);
        assert_eq!(arbitrate(-80.0, None, &p), OutcomeKind::Undetected);
        assert_eq!(arbitrate(-70.0, Some(-72.0), &p), OutcomeKind::SensedOnly);
    }

    #[test]
    fn arbitrate_ties_pass() {
        let p = ChannelParams::default();
        assert_eq!(arbitrate(p.theta_f_dbm, None, &p), OutcomeKind::Received);
        let p = ChannelParams {
            theta_f_dbm: -90.0,
            ..Default::default()
        };
        assert_eq!(arbitrate(-80.0, None, &p), OutcomeKind::Received);
        assert_eq!(arbitrate(-80.0 - 1e-9, None, &p), OutcomeKind::SensedOnly);
    }

    #[test]
    fn zero_intents_empty_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = [Pos::new(0, 0), Pos::new(1, 1)];
        let log = run_mac_step(&[None, None], &pos, &[], &ChannelParams::default(), &MacConfig::default(), &mut rng);
        assert_eq!(log, StepRadioLog::empty(2, 15));
    }

    #[test]
    fn single_agent_transmits_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mac = MacConfig {
            contention_prob: 1.0,
            counter_window: 1,
            slots_per_step: 4,
            packet_slots: 1,
        };
        let log = run_mac_step(&[packet(0)], &[Pos::new(2, 2)], &[], &ChannelParams::default(), &mac, &mut rng);
        assert!(log.transmitted[0]);
        assert!(log.acks[0].is_empty());
        assert!(log.receptions[0].is_empty());
    }

    #[test]
    fn dropped_intent_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mac = MacConfig {
            contention_prob: 0.0,
            ..Default::default()
        };
        let log = run_mac_step(
            &[packet(0), None],
            &[Pos::new(0, 0), Pos::new(1, 0)],
            &[],
            &ChannelParams::default(),
            &mac,
            &mut rng,
        );
        assert!(log.intended[0] && log.dropped[0] && !log.transmitted[0]);
        assert!(!log.dropped[1]);
    }

    #[test]
    fn same_slot_collision_at_third_agent() {
        // Hand-simulated: W = 1 and p = 1 put both senders on the air in slot 0.
        // With no fading, agent 2 hears sender 0 at distance 1 (-20 dBm) and
        // sender 1 at distance 4 (-20 - 30 log10 4 = -38.0618 dBm).
        // SINR of the strong packet: -20 - 10 log10(10^-3.80618 + 10^-9.5) = 18.06 dB >= 15.
        // SINR of the weak packet is negative, so it is only sensed.
        let params = ChannelParams {
            sigma_psi_db: 0.0,
            ..Default::default()
        };
        let mac = MacConfig {
            contention_prob: 1.0,
            counter_window: 1,
            slots_per_step: 3,
            packet_slots: 1,
        };
        let pos = [Pos::new(0, 0), Pos::new(5, 0), Pos::new(1, 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log = run_mac_step(&[packet(0), packet(1), None], &pos, &[], &params, &mac, &mut rng);
        let at_third = &log.receptions[2];
        assert_eq!(at_third.len(), 2);
        assert_eq!(at_third[0].sender, 0);
        assert_eq!(at_third[0].outcome.kind(), OutcomeKind::Received);
        assert!((at_third[0].rss_dbm - -20.0).abs() < 1e-12);
        assert_eq!(at_third[1].sender, 1);
        assert_eq!(at_third[1].outcome.kind(), OutcomeKind::SensedOnly);
        assert!((at_third[1].rss_dbm - (-20.0 - 30.0 * 4f64.log10())).abs() < 1e-12);
        // the two senders are on the air together, so neither decodes the other
        assert_eq!(log.acks[0], BTreeSet::from([2]));
        assert!(log.acks[1].is_empty());
    }

    #[test]
    fn busy_slots_count_sensed_airtime() {
        let params = ChannelParams {
            sigma_psi_db: 0.0,
            ..Default::default()
        };
        let mac = MacConfig {
            contention_prob: 1.0,
            counter_window: 1,
            slots_per_step: 2,
            packet_slots: 3,
        };
        let pos = [Pos::new(0, 0), Pos::new(1, 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let log = run_mac_step(&[packet(0), None], &pos, &[], &params, &mac, &mut rng);
        assert!(log.transmitted[0]);
        assert_eq!(log.busy_slots, vec![0, 2]);
    }

    #[test]
    fn carrier_sense_defers_later_sender() {
        // Packets last the whole step. If the counters differ the later agent
        // senses the first packet and keeps deferring; if they match both go
        // out in the same slot.
        let params = ChannelParams {
            sigma_psi_db: 0.0,
            ..Default::default()
        };
        let mac = MacConfig {
            contention_prob: 1.0,
            counter_window: 2,
            slots_per_step: 3,
            packet_slots: 3,
        };
        let pos = [Pos::new(0, 0), Pos::new(3, 0)];
        let (mut both, mut one) = (0, 0);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let log = run_mac_step(&[packet(0), packet(1)], &pos, &[], &params, &mac, &mut rng);
            match (log.transmitted[0], log.transmitted[1]) {
                (true, true) => {
                    both += 1;
                    assert_eq!(log.receptions[0][0].slot, log.receptions[1][0].slot);
                }
                (true, false) | (false, true) => one += 1,
                (false, false) => panic!("first counter always fires on an idle medium"),
            }
        }
        assert!(both > 0 && one > 0);
    }

    #[test]
    fn trace_lines_one_per_packet_per_receiver() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mac = MacConfig {
            contention_prob: 1.0,
            counter_window: 1,
            slots_per_step: 1,
            packet_slots: 1,
        };
        let pos = [Pos::new(0, 0), Pos::new(2, 0), Pos::new(4, 0)];
        let log = run_mac_step(&[packet(0), None, None], &pos, &[], &ChannelParams::default(), &mac, &mut rng);
        let text = log.trace_lines(7);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("7\t0\t0\t1\t"));
        assert!(lines[0].ends_with("received"));
    }
}
