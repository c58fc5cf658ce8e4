use crate::codec::Inbox;
use crate::error::{Error, Result};
use crate::meta_env::{AugmentedAction, MetaEnv, PAYLOAD_HEAD_DIM};

/// What every agent sees at the start of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvFrame {
    /// Per agent, the flattened augmented observation.
    pub obs: Vec<Vec<f64>>,
    /// Messages sent during the previous step and decoded by each agent.
    pub inboxes: Vec<Inbox>,
    /// Per agent, the environment-provided head of its outgoing payload.
    pub heads: Vec<Vec<f64>>,
    /// Global features for the mixing network.
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvTransition {
    pub frame: EnvFrame,
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    pub done: bool,
}

/// Reset/step interface the trainers drive.
pub trait MarlEnv {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Length of the payload prefix supplied by the environment.
    fn head_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<EnvFrame>;
    fn step(&mut self, actions: &[AugmentedAction], payloads: &[Option<Vec<f64>>]) -> Result<EnvTransition>;
    /// Step at which the episode's first success happened, if the game has one.
    fn first_catch(&self) -> Option<usize> {
        None
    }
}

impl MetaEnv {
    fn frame(&self, inboxes: Vec<Inbox>) -> Result<EnvFrame> {
        let n = self.n_agents();
        Ok(EnvFrame {
            obs: self.observations()?.iter().map(|o| o.concat()).collect(),
            inboxes,
            heads: (0..n)
                .map(|i| self.payload_head(i).map(|h| h.to_vec()))
                .collect::<Result<_>>()?,
            state: self.state_features()?,
        })
    }
}

impl MarlEnv for MetaEnv {
    fn n_agents(&self) -> usize {
        MetaEnv::n_agents(self)
    }

    fn obs_dim(&self) -> usize {
        MetaEnv::obs_dim(self)
    }

    fn state_dim(&self) -> usize {
        MetaEnv::state_dim(self)
    }

    fn head_dim(&self) -> usize {
        PAYLOAD_HEAD_DIM
    }

    fn reset(&mut self, seed: u64) -> Result<EnvFrame> {
        let (_, inboxes) = MetaEnv::reset(self, seed)?;
        self.frame(inboxes)
    }

    fn step(&mut self, actions: &[AugmentedAction], payloads: &[Option<Vec<f64>>]) -> Result<EnvTransition> {
        let out = MetaEnv::step(self, actions, payloads)?;
        Ok(EnvTransition {
            frame: self.frame(out.inboxes)?,
            rewards: out.rewards,
            team_reward: out.team_reward,
            done: out.done,
        })
    }

    fn first_catch(&self) -> Option<usize> {
        MetaEnv::first_catch(self)
    }
}

/// One agent, one step, a fixed reward for each of the ten joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditEnv {
    pub rewards: [f64; AugmentedAction::COUNT],
    live: bool,
}

impl BanditEnv {
    pub fn new(rewards: [f64; AugmentedAction::COUNT]) -> Self {
        Self { rewards, live: false }
    }

    pub fn best_action(&self) -> usize {
        let mut best = 0;
        for (i, &r) in self.rewards.iter().enumerate() {
            if r > self.rewards[best] {
                best = i;
            }
        }
        best
    }

    fn frame() -> EnvFrame {
        EnvFrame {
            obs: vec![vec![1.0]],
            inboxes: vec![Inbox::new()],
            heads: vec![vec![]],
            state: vec![1.0],
        }
    }
}

impl MarlEnv for BanditEnv {
    fn n_agents(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn head_dim(&self) -> usize {
        0
    }

    fn reset(&mut self, _seed: u64) -> Result<EnvFrame> {
        self.live = true;
        Ok(Self::frame())
    }

    fn step(&mut self, actions: &[AugmentedAction], _payloads: &[Option<Vec<f64>>]) -> Result<EnvTransition> {
        if !self.live {
            return Err(Error::Contract("bandit stepped without reset".into()));
        }
        let [a] = actions else {
            return Err(Error::Contract(format!("bandit has one agent, got {} actions", actions.len())));
        };
        self.live = false;
        let r = self.rewards[a.index()];
        Ok(EnvTransition {
            frame: Self::frame(),
            rewards: vec![r],
            team_reward: r,
            done: true,
        })
    }
}
