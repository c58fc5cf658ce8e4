//! Game and radio stepped together, with messages lagged by one step.
//!
//! Each meta-step runs one radio phase (packets from agents that chose to
//! communicate, propagated from their positions at the start of the step) and
//! one game phase. Messages decoded during step `t` appear in the receivers'
//! inboxes at step `t + 1`, together with wireless measurements built from the
//! step-`t` radio log.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Inbox;
use crate::error::{Error, Result};
use crate::geometry::{Obstacle, Pos};
use crate::grid::{
    lj_reset, lj_step, pp_reset, pp_step, GameAction, GameObservation, LumberjacksConfig, LumberjacksState,
    PredatorPreyConfig, PredatorPreyState,
};
use crate::wireless::{run_mac_step, ChannelParams, MacConfig, Packet, ReceptionOutcome, StepRadioLog};

/// Lower and upper ends of the dBm range mapped onto `[-1, 1]`.
pub const RSS_FLOOR_DBM: f64 = -100.0;
pub const RSS_CEIL_DBM: f64 = 0.0;

/// Length of the position head every payload starts with.
pub const PAYLOAD_HEAD_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameConfig {
    PredatorPrey(PredatorPreyConfig),
    Lumberjacks(LumberjacksConfig),
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig::PredatorPrey(PredatorPreyConfig::default())
    }
}

impl GameConfig {
    pub fn n_agents(&self) -> usize {
        match self {
            GameConfig::PredatorPrey(c) => c.predators,
            GameConfig::Lumberjacks(c) => c.agents,
        }
    }

    pub fn vision(&self) -> usize {
        match self {
            GameConfig::PredatorPrey(c) => c.vision,
            GameConfig::Lumberjacks(c) => c.vision,
        }
    }

    pub fn step_cap(&self) -> usize {
        match self {
            GameConfig::PredatorPrey(c) => c.step_cap,
            GameConfig::Lumberjacks(c) => c.step_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GameConfig::PredatorPrey(c) => c.validate(),
            GameConfig::Lumberjacks(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub radio: ChannelParams,
    pub mac: MacConfig,
    /// When set, every episode draws its background noise uniformly from
    /// `[lo, hi]` dBm instead of using `radio.noise_dbm`.
    pub noise_range_dbm: Option<[f64; 2]>,
    /// Steps without hearing a peer after which its staleness feature saturates.
    pub staleness_cap: u32,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            radio: ChannelParams::default(),
            mac: MacConfig::default(),
            noise_range_dbm: None,
            staleness_cap: 20,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        self.mac.validate()?;
        if let Some([lo, hi]) = self.noise_range_dbm {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "channel.noise_range_dbm must be a finite [lo, hi] with lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        if self.staleness_cap == 0 {
            return Err(Error::Config("channel.staleness_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaEnvConfig {
    pub game: GameConfig,
    pub channel: ChannelConfig,
}

impl MetaEnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        self.channel.validate()
    }
}

/// A game move plus the binary decision to broadcast a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentedAction {
    pub game: GameAction,
    pub comm: bool,
}

impl AugmentedAction {
    pub const COUNT: usize = GameAction::COUNT * 2;

    /// Joint index `2 * game + comm`.
    pub fn index(self) -> usize {
        self.game.index() * 2 + usize::from(self.comm)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Some(Self {
            game: GameAction::from_index(i / 2)?,
            comm: i % 2 == 1,
        })
    }
}

/// Per peer `[received, rss, staleness]`, then own
/// `[transmitted, ack fraction, busy fraction]`.
///
/// `received` is 1 when the peer's packet was decoded last step. `rss` is the
/// most recent decoded RSS mapped affinely from `[-100, 0]` dBm onto `[-1, 1]`.
/// `staleness` is steps since the peer was last decoded, divided by the cap
/// and clipped to 1. `transmitted` is 1 after a transmission, -1 when the
/// agent wanted to send but never got the medium, 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct WirelessObservation(pub Vec<f64>);

impl WirelessObservation {
    pub fn len_for(n_agents: usize) -> usize {
        3 * (n_agents - 1) + 3
    }

    /// State at episode start: nothing heard, every peer maximally stale.
    pub fn initial(n_agents: usize) -> Self {
        let mut v = vec![0.0; Self::len_for(n_agents)];
        for p in 0..n_agents - 1 {
            v[3 * p + 2] = 1.0;
        }
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Slot index of `peer` in `agent`'s observation.
    pub fn peer_slot(agent: usize, peer: usize) -> usize {
        debug_assert_ne!(agent, peer);
        if peer < agent {
            peer
        } else {
            peer - 1
        }
    }
}

pub fn normalize_rss(rss_dbm: f64) -> f64 {
    let x = (rss_dbm - RSS_FLOOR_DBM) / (RSS_CEIL_DBM - RSS_FLOOR_DBM) * 2.0 - 1.0;
    x.clamp(-1.0, 1.0)
}

/// Next wireless observation of `agent` from the step's radio log and its
/// previous observation.
pub fn build_wireless_obs(
    log: &StepRadioLog,
    prev: &WirelessObservation,
    agent: usize,
    staleness_cap: u32,
) -> WirelessObservation {
    let n = log.n_agents();
    let cap = f64::from(staleness_cap);
    let mut v = prev.0.clone();
    for peer in (0..n).filter(|&p| p != agent) {
        let k = WirelessObservation::peer_slot(agent, peer);
        let decoded = log.receptions[agent]
            .iter()
            .filter(|r| r.sender == peer)
            .find_map(|r| match r.outcome {
                ReceptionOutcome::Received { rss_dbm, .. } => Some(rss_dbm),
                _ => None,
            });
        match decoded {
            Some(rss) => {
                v[3 * k] = 1.0;
                v[3 * k + 1] = normalize_rss(rss);
                v[3 * k + 2] = 0.0;
            }
            None => {
                v[3 * k] = 0.0;
                let steps = (prev.0[3 * k + 2] * cap).round() + 1.0;
                v[3 * k + 2] = (steps / cap).min(1.0);
            }
        }
    }
    let own = 3 * (n - 1);
    v[own] = if log.transmitted[agent] {
        1.0
    } else if log.dropped[agent] {
        -1.0
    } else {
        0.0
    };
    v[own + 1] = if n > 1 {
        log.acks[agent].len() as f64 / (n - 1) as f64
    } else {
        0.0
    };
    v[own + 2] = f64::from(log.busy_slots[agent]) / f64::from(log.slots.max(1));
    WirelessObservation(v)
}

/// Game observation followed by wireless measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedObservation {
    pub game: GameObservation,
    pub wireless: WirelessObservation,
}

impl AugmentedObservation {
    pub fn len(&self) -> usize {
        self.game.0.len() + self.wireless.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.game.0);
        v.extend_from_slice(&self.wireless.0);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GameState {
    PredatorPrey(PredatorPreyState),
    Lumberjacks(LumberjacksState),
}

impl GameState {
    pub fn positions(&self) -> &[Pos] {
        match self {
            GameState::PredatorPrey(s) => &s.predators,
            GameState::Lumberjacks(s) => &s.agents,
        }
    }

    pub fn grid_size(&self) -> usize {
        match self {
            GameState::PredatorPrey(s) => s.n,
            GameState::Lumberjacks(s) => s.n,
        }
    }

    pub fn step(&self) -> usize {
        match self {
            GameState::PredatorPrey(s) => s.step,
            GameState::Lumberjacks(s) => s.step,
        }
    }

    fn observe(&self, agent: usize, vision: usize) -> GameObservation {
        match self {
            GameState::PredatorPrey(s) => s.observe(agent, vision),
            GameState::Lumberjacks(s) => s.observe(agent, vision),
        }
    }
}

/// Result of one [`MetaEnv::step`].
#[derive(Debug, Clone)]
pub struct MetaStep {
    pub obs: Vec<AugmentedObservation>,
    /// Messages decoded during this step, to be read at the next one.
    pub inboxes: Vec<Inbox>,
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    pub done: bool,
    pub radio: StepRadioLog,
}

#[derive(Serialize)]
struct TelemetryRecord<'a> {
    step: usize,
    comm: &'a [u8],
    transmitted: usize,
    dropped: usize,
    inbox_sizes: Vec<usize>,
    received: usize,
    sensed: usize,
    rss_mean_dbm: Option<f64>,
    noise_dbm: f64,
}

pub struct MetaEnv {
    cfg: MetaEnvConfig,
    state: Option<GameState>,
    wireless: Vec<WirelessObservation>,
    game_rng: ChaCha8Rng,
    channel_rng: ChaCha8Rng,
    noise_dbm: f64,
    done: bool,
    telemetry: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for MetaEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetaEnv")
            .field("cfg", &self.cfg)
            .field("state", &self.state)
            .field("noise_dbm", &self.noise_dbm)
            .field("done", &self.done)
            .finish_non_exhaustive()
    }
}

impl MetaEnv {
    pub fn new(cfg: MetaEnvConfig) -> Result<Self> {
        cfg.validate()?;
        let noise_dbm = cfg.channel.radio.noise_dbm;
        Ok(Self {
            cfg,
            state: None,
            wireless: Vec::new(),
            game_rng: ChaCha8Rng::seed_from_u64(0),
            channel_rng: ChaCha8Rng::seed_from_u64(0),
            noise_dbm,
            done: true,
            telemetry: None,
        })
    }

    pub fn config(&self) -> &MetaEnvConfig {
        &self.cfg
    }

    /// Write one JSON line per step to `w`.
    pub fn set_telemetry(&mut self, w: Option<Box<dyn Write + Send>>) {
        self.telemetry = w;
    }

    pub fn n_agents(&self) -> usize {
        self.cfg.game.n_agents()
    }

    pub fn game_obs_dim(&self) -> usize {
        GameObservation::len_for(self.cfg.game.vision())
    }

    pub fn wireless_obs_dim(&self) -> usize {
        WirelessObservation::len_for(self.n_agents())
    }

    pub fn obs_dim(&self) -> usize {
        self.game_obs_dim() + self.wireless_obs_dim()
    }

    /// Length of [`state_features`](Self::state_features).
    pub fn state_dim(&self) -> usize {
        let n = self.n_agents();
        let game = match &self.cfg.game {
            GameConfig::PredatorPrey(_) => 2 * n + 2 + n + 1,
            GameConfig::Lumberjacks(c) => 2 * n + 3 * c.trees + 1,
        };
        game + n * self.obs_dim()
    }

    pub fn state(&self) -> Option<&GameState> {
        self.state.as_ref()
    }

    pub fn noise_dbm(&self) -> f64 {
        self.noise_dbm
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Step (1-based) of the first prey catch, in predator-prey.
    pub fn first_catch(&self) -> Option<usize> {
        match &self.state {
            Some(GameState::PredatorPrey(s)) => s.first_catch,
            _ => None,
        }
    }

    fn live_state(&self) -> Result<&GameState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::Contract("environment used before reset".into()))
    }

    /// Radio attenuators of the current layout.
    pub fn attenuators(&self) -> Vec<Obstacle> {
        match (&self.state, &self.cfg.game) {
            (Some(GameState::PredatorPrey(s)), _) => s.obstacles.clone(),
            (Some(GameState::Lumberjacks(s)), GameConfig::Lumberjacks(c)) => s.attenuators(c.tree_atten_db),
            _ => Vec::new(),
        }
    }

    /// Start a new episode. The game and channel draw from two independent
    /// streams derived from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<(Vec<AugmentedObservation>, Vec<Inbox>)> {
        self.game_rng = ChaCha8Rng::seed_from_u64(seed);
        self.game_rng.set_stream(1);
        self.channel_rng = ChaCha8Rng::seed_from_u64(seed);
        self.channel_rng.set_stream(2);
        self.noise_dbm = match self.cfg.channel.noise_range_dbm {
            Some([lo, hi]) if hi > lo => self.channel_rng.gen_range(lo..=hi),
            Some([lo, _]) => lo,
            None => self.cfg.channel.radio.noise_dbm,
        };
        let state = match &self.cfg.game {
            GameConfig::PredatorPrey(c) => GameState::PredatorPrey(pp_reset(c, &mut self.game_rng)?),
            GameConfig::Lumberjacks(c) => GameState::Lumberjacks(lj_reset(c, &mut self.game_rng)?),
        };
        let n = self.n_agents();
        self.wireless = vec![WirelessObservation::initial(n); n];
        self.state = Some(state);
        self.done = false;
        Ok((self.observations()?, vec![Inbox::new(); n]))
    }

    pub fn observations(&self) -> Result<Vec<AugmentedObservation>> {
        let state = self.live_state()?;
        let vision = self.cfg.game.vision();
        Ok((0..self.n_agents())
            .map(|i| AugmentedObservation {
                game: state.observe(i, vision),
                wireless: self.wireless[i].clone(),
            })
            .collect())
    }

    /// Agent's own normalized position, the fixed head of its payload.
    pub fn payload_head(&self, agent: usize) -> Result<[f64; PAYLOAD_HEAD_DIM]> {
        let state = self.live_state()?;
        Ok(state.positions()[agent].normalized(state.grid_size()))
    }

    /// Global features for centralized training: positions and status of
    /// every entity, the step fraction, then every agent's observation.
    pub fn state_features(&self) -> Result<Vec<f64>> {
        let state = self.live_state()?;
        let mut v = Vec::with_capacity(self.state_dim());
        match state {
            GameState::PredatorPrey(s) => {
                for p in &s.predators {
                    v.extend_from_slice(&p.normalized(s.n));
                }
                v.extend_from_slice(&s.prey.normalized(s.n));
                v.extend(s.caught.iter().map(|&c| f64::from(u8::from(c))));
            }
            GameState::Lumberjacks(s) => {
                for p in &s.agents {
                    v.extend_from_slice(&p.normalized(s.n));
                }
                for t in &s.trees {
                    v.extend_from_slice(&t.pos.normalized(s.n));
                    v.push(f64::from(u8::from(t.alive)));
                }
            }
        }
        v.push(state.step() as f64 / self.cfg.game.step_cap() as f64);
        for o in self.observations()? {
            v.extend_from_slice(&o.game.0);
            v.extend_from_slice(&o.wireless.0);
        }
        Ok(v)
    }

    /// One meta-step. `payloads[i]` must be present for every agent whose
    /// action has `comm` set.
    pub fn step(&mut self, actions: &[AugmentedAction], payloads: &[Option<Vec<f64>>]) -> Result<MetaStep> {
        let n = self.n_agents();
        if self.done {
            return Err(Error::Contract("step called on a finished episode; reset first".into()));
        }
        if actions.len() != n || payloads.len() != n {
            return Err(Error::Contract(format!(
                "expected {n} actions and payload slots, got {} and {}",
                actions.len(),
                payloads.len()
            )));
        }
        let state = self.live_state()?.clone();

        let mut intents = Vec::with_capacity(n);
        for (i, (a, p)) in actions.iter().zip(payloads).enumerate() {
            intents.push(match (a.comm, p) {
                (false, _) => None,
                (true, Some(payload)) => Some(Packet {
                    sender: i,
                    payload: payload.clone(),
                    tx_power_dbm: self.cfg.channel.radio.p_t_dbm,
                }),
                (true, None) => {
                    return Err(Error::Contract(format!("agent {i} chose to communicate without a payload")))
                }
            });
        }
        let radio_params = ChannelParams {
            noise_dbm: self.noise_dbm,
            ..self.cfg.channel.radio
        };
        let log = run_mac_step(
            &intents,
            state.positions(),
            &self.attenuators(),
            &radio_params,
            &self.cfg.channel.mac,
            &mut self.channel_rng,
        );

        let game_actions: Vec<GameAction> = actions.iter().map(|a| a.game).collect();
        let (next, rewards, done) = match (&state, &self.cfg.game) {
            (GameState::PredatorPrey(s), GameConfig::PredatorPrey(c)) => {
                let (s2, r, d) = pp_step(c, s, &game_actions, &mut self.game_rng)?;
                (GameState::PredatorPrey(s2), r, d)
            }
            (GameState::Lumberjacks(s), GameConfig::Lumberjacks(c)) => {
                let (s2, r, d) = lj_step(c, s, &game_actions)?;
                (GameState::Lumberjacks(s2), r, d)
            }
            _ => unreachable!("state kind always follows config kind"),
        };

        let cap = self.cfg.channel.staleness_cap;
        for i in 0..n {
            self.wireless[i] = build_wireless_obs(&log, &self.wireless[i], i, cap);
        }
        let inboxes: Vec<Inbox> = (0..n)
            .map(|r| {
                log.received_by(r)
                    .filter_map(|rec| match &rec.outcome {
                        ReceptionOutcome::Received { payload, sender, .. } => Some((*sender, payload.clone())),
                        _ => None,
                    })
                    .collect()
            })
            .collect();

        if let Some(w) = self.telemetry.as_mut() {
            let comm: Vec<u8> = actions.iter().map(|a| u8::from(a.comm)).collect();
            let mut rss_sum = 0.0;
            let (mut received, mut sensed) = (0, 0);
            for rec in log.receptions.iter().flatten() {
                match rec.outcome {
                    ReceptionOutcome::Received { .. } => {
                        received += 1;
                        rss_sum += rec.rss_dbm;
                    }
                    ReceptionOutcome::SensedOnly { .. } => sensed += 1,
                    ReceptionOutcome::Undetected => {}
                }
            }
            let record = TelemetryRecord {
                step: state.step(),
                comm: &comm,
                transmitted: log.transmitted.iter().filter(|&&t| t).count(),
                dropped: log.dropped.iter().filter(|&&d| d).count(),
                inbox_sizes: inboxes.iter().map(Inbox::len).collect(),
                received,
                sensed,
                rss_mean_dbm: (received > 0).then(|| rss_sum / received as f64),
                noise_dbm: self.noise_dbm,
            };
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }

        self.state = Some(next);
        self.done = done;
        let team_reward = rewards.iter().sum();
        Ok(MetaStep {
            obs: self.observations()?,
            inboxes,
            rewards,
            team_reward,
            done,
            radio: log,
        })
    }
}
