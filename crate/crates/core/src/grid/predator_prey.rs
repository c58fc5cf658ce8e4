use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{observe_view, CellView, GameAction, GameObservation, RewardMode};
use crate::error::{Error, Result};
use crate::geometry::{Obstacle, Orientation, Pos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreyMode {
    /// Uniformly random move each step until the first catch, then frozen.
    #[default]
    Random,
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredatorPreyConfig {
    pub n: usize,
    pub predators: usize,
    pub vision: usize,
    pub obstacles: usize,
    pub obstacle_len: usize,
    /// Candidate attenuations; each obstacle draws one uniformly.
    pub atten_set: Vec<f64>,
    pub prey_mode: PreyMode,
    pub step_cap: usize,
    pub catch_reward: f64,
    pub step_penalty: f64,
    pub reward_mode: RewardMode,
}

impl Default for PredatorPreyConfig {
    fn default() -> Self {
        Self {
            n: 10,
            predators: 3,
            vision: 0,
            obstacles: 1,
            obstacle_len: 9,
            atten_set: vec![4.5],
            prey_mode: PreyMode::Random,
            step_cap: 60,
            catch_reward: 1.0,
            step_penalty: -0.05,
            reward_mode: RewardMode::Joint,
        }
    }
}

impl PredatorPreyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("game.n must be >= 2".into()));
        }
        if self.predators < 1 {
            return Err(Error::Config("game.agents must be >= 1".into()));
        }
        if self.obstacles > 0 && !(1..=self.n).contains(&self.obstacle_len) {
            return Err(Error::Config(format!(
                "game.obstacle_len must lie in [1, {}], got {}",
                self.n, self.obstacle_len
            )));
        }
        if self.obstacles > 0 && self.atten_set.is_empty() {
            return Err(Error::Config("game.atten_set must not be empty when obstacles > 0".into()));
        }
        if self.atten_set.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("game.atten_set entries must be finite".into()));
        }
        if self.step_cap < 1 {
            return Err(Error::Config("game.step_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredatorPreyState {
    pub n: usize,
    pub predators: Vec<Pos>,
    pub prey: Pos,
    pub caught: Vec<bool>,
    pub step: usize,
    pub obstacles: Vec<Obstacle>,
    /// Step count (1-based) at which the first predator caught the prey.
    pub first_catch: Option<usize>,
}

impl PredatorPreyState {
    pub fn is_blocked(&self, p: Pos) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    fn legal(&self, p: Pos) -> bool {
        p.in_grid(self.n) && !self.is_blocked(p)
    }

    pub fn all_caught(&self) -> bool {
        self.caught.iter().all(|&c| c)
    }

    pub fn is_done(&self, step_cap: usize) -> bool {
        self.all_caught() || self.step >= step_cap
    }

    pub fn observe(&self, agent: usize, vision: usize) -> GameObservation {
        observe_view(self, agent, vision)
    }
}

impl CellView for PredatorPreyState {
    fn grid_size(&self) -> usize {
        self.n
    }
    fn is_blocked(&self, p: Pos) -> bool {
        PredatorPreyState::is_blocked(self, p)
    }
    fn has_target(&self, p: Pos) -> bool {
        self.prey == p
    }
    fn has_other_agent(&self, p: Pos, me: usize) -> bool {
        self.predators.iter().enumerate().any(|(i, &q)| i != me && q == p)
    }
    fn agent_pos(&self, agent: usize) -> Pos {
        self.predators[agent]
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Fresh episode: non-overlapping walls at random orientation and position,
/// then predators and prey on distinct free cells.
pub fn pp_reset<R: Rng + ?Sized>(cfg: &PredatorPreyConfig, rng: &mut R) -> Result<PredatorPreyState> {
    cfg.validate()?;
    let n = cfg.n;
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(cfg.obstacles);
    for k in 0..cfg.obstacles {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let orientation = if rng.gen_bool(0.5) {
                Orientation::Horizontal
            } else {
                Orientation::Vertical
            };
            let (max_x, max_y) = match orientation {
                Orientation::Horizontal => (n - cfg.obstacle_len, n - 1),
                Orientation::Vertical => (n - 1, n - cfg.obstacle_len),
            };
            let anchor = Pos::new(rng.gen_range(0..=max_x) as i32, rng.gen_range(0..=max_y) as i32);
            let candidate = Obstacle::new(anchor, orientation, cfg.obstacle_len, 0.0);
            if candidate.cells().any(|c| obstacles.iter().any(|o| o.contains(c))) {
                continue;
            }
            obstacles.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place obstacle {} of length {} on a {n}x{n} grid",
                k + 1,
                cfg.obstacle_len
            )));
        }
    }
    for o in &mut obstacles {
        o.atten_db = *cfg.atten_set.choose(rng).expect("atten_set non-empty");
    }

    let mut free: Vec<Pos> = (0..n as i32)
        .flat_map(|y| (0..n as i32).map(move |x| Pos::new(x, y)))
        .filter(|p| !obstacles.iter().any(|o| o.contains(*p)))
        .collect();
    let needed = cfg.predators + 1;
    if free.len() < needed {
        return Err(Error::Infeasible(format!(
            "{} free cells cannot hold {} predators and a prey",
            free.len(),
            cfg.predators
        )));
    }
    let (chosen, _) = free.partial_shuffle(rng, needed);
    let chosen = chosen.to_vec();
    Ok(PredatorPreyState {
        n,
        predators: chosen[..cfg.predators].to_vec(),
        prey: chosen[cfg.predators],
        caught: vec![false; cfg.predators],
        step: 0,
        obstacles,
        first_catch: None,
    })
}

/// Advance one step. Predators move first (moves into walls or off the grid
/// become `Stay`; caught predators hold their cell), then the prey wanders if
/// nobody has caught it yet. Per-predator rewards: `catch_reward` at the catch
/// instant, `step_penalty` for every predator still uncaught afterwards.
pub fn pp_step<R: Rng + ?Sized>(
    cfg: &PredatorPreyConfig,
    state: &PredatorPreyState,
    actions: &[GameAction],
    rng: &mut R,
) -> Result<(PredatorPreyState, Vec<f64>, bool)> {
    if state.is_done(cfg.step_cap) {
        return Err(Error::Contract("pp_step called on a finished episode".into()));
    }
    if actions.len() != state.predators.len() {
        return Err(Error::Contract(format!(
            "expected {} actions, got {}",
            state.predators.len(),
            actions.len()
        )));
    }
    let mut next = state.clone();
    next.step += 1;
    for (i, &a) in actions.iter().enumerate() {
        if next.caught[i] {
            continue;
        }
        let target = a.apply(next.predators[i]);
        if next.legal(target) {
            next.predators[i] = target;
        }
    }

    let mut rewards = vec![0.0; next.predators.len()];
    let settle_catches = |s: &mut PredatorPreyState, rewards: &mut [f64]| {
        for i in 0..s.predators.len() {
            if !s.caught[i] && s.predators[i] == s.prey {
                s.caught[i] = true;
                rewards[i] += cfg.catch_reward;
                s.first_catch.get_or_insert(s.step);
            }
        }
    };
    settle_catches(&mut next, &mut rewards);

    if cfg.prey_mode == PreyMode::Random && !next.caught.iter().any(|&c| c) {
        let a = GameAction::ALL[rng.gen_range(0..GameAction::COUNT)];
        let target = a.apply(next.prey);
        if next.legal(target) {
            next.prey = target;
        }
        settle_catches(&mut next, &mut rewards);
    }

    for (r, &c) in rewards.iter_mut().zip(&next.caught) {
        if !c {
            *r += cfg.step_penalty;
        }
    }
    let done = next.is_done(cfg.step_cap);
    Ok((next, rewards, done))
}
