//! Grid-world benchmark games: predator-prey with walls, and lumberjacks.
//!
//! Both games are pure step functions over cloneable state. Randomness (layout
//! at reset, prey wandering) comes from an explicit random stream.

mod lumberjacks;
mod predator_prey;

use serde::{Deserialize, Serialize};

pub use lumberjacks::{lj_reset, lj_step, LumberjacksConfig, LumberjacksState, Tree};
pub use predator_prey::{pp_reset, pp_step, PredatorPreyConfig, PredatorPreyState, PreyMode};

use crate::geometry::Pos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GameAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GameAction {
    pub const ALL: [GameAction; 5] = [
        GameAction::Up,
        GameAction::Down,
        GameAction::Left,
        GameAction::Right,
        GameAction::Stay,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Up decreases the row index.
    pub fn delta(self) -> (i32, i32) {
        match self {
            GameAction::Up => (0, -1),
            GameAction::Down => (0, 1),
            GameAction::Left => (-1, 0),
            GameAction::Right => (1, 0),
            GameAction::Stay => (0, 0),
        }
    }

    pub fn apply(self, p: Pos) -> Pos {
        let (dx, dy) = self.delta();
        p.offset(dx, dy)
    }
}

/// Whether per-agent rewards are reported individually or as the team sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Joint,
    Individual,
}

/// Channels of the per-cell encoding in a [`GameObservation`].
pub const CELL_CHANNELS: usize = 4;
const CH_EMPTY: usize = 0;
const CH_OBSTACLE: usize = 1;
const CH_TARGET: usize = 2;
const CH_AGENT: usize = 3;

/// Local view of one agent: a `(2v+1)^2` window of cells, each encoded as
/// `[empty, obstacle, prey-or-tree, other agent]`, followed by the agent's
/// own position scaled to `[0, 1]`. Cells off the grid read as obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct GameObservation(pub Vec<f64>);

impl GameObservation {
    pub fn len_for(vision: usize) -> usize {
        let side = 2 * vision + 1;
        side * side * CELL_CHANNELS + 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Own-position tail.
    pub fn position(&self) -> [f64; 2] {
        let n = self.0.len();
        [self.0[n - 2], self.0[n - 1]]
    }
}

/// What a cell holds, from the point of view of one observing agent.
pub(crate) trait CellView {
    fn grid_size(&self) -> usize;
    fn is_blocked(&self, p: Pos) -> bool;
    fn has_target(&self, p: Pos) -> bool;
    fn has_other_agent(&self, p: Pos, me: usize) -> bool;
    fn agent_pos(&self, agent: usize) -> Pos;
}

pub(crate) fn observe_view<V: CellView>(view: &V, agent: usize, vision: usize) -> GameObservation {
    let n = view.grid_size();
    let me = view.agent_pos(agent);
    let v = vision as i32;
    let mut out = Vec::with_capacity(GameObservation::len_for(vision));
    for dy in -v..=v {
        for dx in -v..=v {
            let p = me.offset(dx, dy);
            let mut cell = [0.0; CELL_CHANNELS];
            if !p.in_grid(n) || view.is_blocked(p) {
                cell[CH_OBSTACLE] = 1.0;
            } else {
                if view.has_target(p) {
                    cell[CH_TARGET] = 1.0;
                }
                if view.has_other_agent(p, agent) {
                    cell[CH_AGENT] = 1.0;
                }
                if cell == [0.0; CELL_CHANNELS] {
                    cell[CH_EMPTY] = 1.0;
                }
            }
            out.extend_from_slice(&cell);
        }
    }
    out.extend_from_slice(&me.normalized(n));
    GameObservation(out)
}

pub(crate) fn in_window(center: Pos, p: Pos, vision: usize) -> bool {
    let v = vision as i32;
    (p.x - center.x).abs() <= v && (p.y - center.y).abs() <= v
}

/// One line of an episode trace: `(step, agent, position, action, reward)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub agent: usize,
    pub x: i32,
    pub y: i32,
    pub action: GameAction,
    pub reward: f64,
}

/// Serialize trace records as JSON lines.
pub fn write_trace<W: std::io::Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
