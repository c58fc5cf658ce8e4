use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{in_window, observe_view, CellView, GameAction, GameObservation, RewardMode};
use crate::error::{Error, Result};
use crate::geometry::{Obstacle, Pos};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LumberjacksConfig {
    pub n: usize,
    pub agents: usize,
    pub vision: usize,
    pub trees: usize,
    /// Agents that must stand in a tree's 4-neighbourhood to chop it.
    pub tree_strength: usize,
    pub tree_atten_db: f64,
    pub observe_reward: f64,
    pub chop_reward: f64,
    pub step_penalty: f64,
    /// Pay `observe_reward` only the first time an agent sees each tree.
    pub observe_first_sight_only: bool,
    pub step_cap: usize,
    pub reward_mode: RewardMode,
}

impl Default for LumberjacksConfig {
    fn default() -> Self {
        Self {
            n: 10,
            agents: 5,
            vision: 1,
            trees: 3,
            tree_strength: 2,
            tree_atten_db: 4.5,
            observe_reward: 0.05,
            chop_reward: 0.5,
            step_penalty: -0.1,
            observe_first_sight_only: false,
            step_cap: 60,
            reward_mode: RewardMode::Joint,
        }
    }
}

impl LumberjacksConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("game.n must be >= 2".into()));
        }
        if self.agents < 1 {
            return Err(Error::Config("game.agents must be >= 1".into()));
        }
        if self.tree_strength < 1 {
            return Err(Error::Config("game.tree_strength must be >= 1".into()));
        }
        if self.step_cap < 1 {
            return Err(Error::Config("game.step_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub pos: Pos,
    pub strength: usize,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LumberjacksState {
    pub n: usize,
    pub agents: Vec<Pos>,
    pub trees: Vec<Tree>,
    pub step: usize,
    /// `seen[agent][tree]`, only tracked for first-sight rewards.
    pub seen: Vec<Vec<bool>>,
}

impl LumberjacksState {
    pub fn alive_trees(&self) -> usize {
        self.trees.iter().filter(|t| t.alive).count()
    }

    pub fn is_done(&self, step_cap: usize) -> bool {
        self.alive_trees() == 0 || self.step >= step_cap
    }

    pub fn observe(&self, agent: usize, vision: usize) -> GameObservation {
        observe_view(self, agent, vision)
    }

    /// Live trees as single-cell radio attenuators.
    pub fn attenuators(&self, atten_db: f64) -> Vec<Obstacle> {
        self.trees
            .iter()
            .filter(|t| t.alive)
            .map(|t| Obstacle::single(t.pos, atten_db))
            .collect()
    }
}

impl CellView for LumberjacksState {
    fn grid_size(&self) -> usize {
        self.n
    }
    // trees never block movement or sight
    fn is_blocked(&self, _p: Pos) -> bool {
        false
    }
    fn has_target(&self, p: Pos) -> bool {
        self.trees.iter().any(|t| t.alive && t.pos == p)
    }
    fn has_other_agent(&self, p: Pos, me: usize) -> bool {
        self.agents.iter().enumerate().any(|(i, &q)| i != me && q == p)
    }
    fn agent_pos(&self, agent: usize) -> Pos {
        self.agents[agent]
    }
}

/// Trees on distinct random cells, agents on distinct cells without trees.
pub fn lj_reset<R: Rng + ?Sized>(cfg: &LumberjacksConfig, rng: &mut R) -> Result<LumberjacksState> {
    cfg.validate()?;
    let n = cfg.n;
    let mut cells: Vec<Pos> = (0..n as i32)
        .flat_map(|y| (0..n as i32).map(move |x| Pos::new(x, y)))
        .collect();
    let needed = cfg.trees + cfg.agents;
    if cells.len() < needed {
        return Err(Error::Infeasible(format!(
            "a {n}x{n} grid cannot hold {} trees and {} agents",
            cfg.trees, cfg.agents
        )));
    }
    let (chosen, _) = cells.partial_shuffle(rng, needed);
    let trees = chosen[..cfg.trees]
        .iter()
        .map(|&pos| Tree {
            pos,
            strength: cfg.tree_strength,
            alive: true,
        })
        .collect();
    Ok(LumberjacksState {
        n,
        agents: chosen[cfg.trees..].to_vec(),
        trees,
        step: 0,
        seen: vec![vec![false; cfg.trees]; cfg.agents],
    })
}

/// Advance one step: move, chop every live tree with enough adjacent agents
/// (each adjacent agent earns `chop_reward`), pay `observe_reward` to agents
/// that still see a live tree, and charge everyone `step_penalty`.
pub fn lj_step(
    cfg: &LumberjacksConfig,
    state: &LumberjacksState,
    actions: &[GameAction],
) -> Result<(LumberjacksState, Vec<f64>, bool)> {
    if state.is_done(cfg.step_cap) {
        return Err(Error::Contract("lj_step called on a finished episode".into()));
    }
    if actions.len() != state.agents.len() {
        return Err(Error::Contract(format!(
            "expected {} actions, got {}",
            state.agents.len(),
            actions.len()
        )));
    }
    let mut next = state.clone();
    next.step += 1;
    for (p, &a) in next.agents.iter_mut().zip(actions) {
        let target = a.apply(*p);
        if target.in_grid(next.n) {
            *p = target;
        }
    }

    let mut rewards = vec![0.0; next.agents.len()];
    for tree in next.trees.iter_mut().filter(|t| t.alive) {
        let adjacent: Vec<usize> = next
            .agents
            .iter()
            .enumerate()
            .filter(|(_, p)| p.manhattan(tree.pos) == 1)
            .map(|(i, _)| i)
            .collect();
        if adjacent.len() >= tree.strength {
            tree.alive = false;
            for i in adjacent {
                rewards[i] += cfg.chop_reward;
            }
        }
    }

    for (i, r) in rewards.iter_mut().enumerate() {
        let me = next.agents[i];
        let mut sees = false;
        for (k, tree) in next.trees.iter().enumerate() {
            if tree.alive && in_window(me, tree.pos, cfg.vision) {
                if cfg.observe_first_sight_only {
                    if !next.seen[i][k] {
                        next.seen[i][k] = true;
                        sees = true;
                    }
                } else {
                    sees = true;
                }
            }
        }
        if sees {
            *r += cfg.observe_reward;
        }
        *r += cfg.step_penalty;
    }

    let done = next.is_done(cfg.step_cap);
    Ok((next, rewards, done))
}
