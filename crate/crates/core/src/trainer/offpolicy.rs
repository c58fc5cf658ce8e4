use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::meta_env::AugmentedAction;
use crate::nn::{Checkpoint, Matrix, ParamStore};

use super::env::MarlEnv;
use super::model::AgentModel;
use super::replay::{ReplayBuffer, TrainBatch};
use super::rollout::{greedy_index, rollout_episode, ActMode, HeadKind};
use super::{episode_seed, EpisodeReport, Learner, TrainConfig};

pub(crate) const ONLINE_PREFIX: &str = "online/";
pub(crate) const TARGET_PREFIX: &str = "target/";
pub(crate) const EPISODES_KEY: &str = "trainer.episodes";
pub(crate) const ENV_STEPS_KEY: &str = "trainer.env_steps";

/// `y = r` on terminal transitions, `r + gamma * next` otherwise.
pub fn bellman_targets(rewards: &[f64], done: &[bool], next_q_tot: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(done)
        .zip(next_q_tot)
        .map(|((&r, &d), &q)| if d { r } else { r + gamma * q })
        .collect()
}

/// Mean squared TD error of the mixed value over every real transition in
/// the batch. Gradients are accumulated into `ps`; `target` is read only.
/// `comm = false` restricts the target's max to silent actions.
pub fn offpolicy_loss_and_grad(
    model: &AgentModel,
    ps: &mut ParamStore,
    target: &ParamStore,
    batch: &TrainBatch,
    gamma: f64,
    comm: bool,
) -> Result<f64> {
    let mixer = model
        .mixer()
        .ok_or_else(|| Error::Contract("off-policy training needs a mixing network".into()))?;
    let seq = &batch.seq;
    let n = seq.n;
    let state_dim = model.cfg.state_dim;
    let cells: Vec<(usize, usize)> = (0..seq.steps.saturating_sub(1))
        .flat_map(|t| (0..seq.groups).filter(move |&g| seq.valid[t][g]).map(move |g| (t, g)))
        .collect();
    if cells.is_empty() {
        return Ok(0.0);
    }
    let (outs, caches) = model.unroll(ps, seq);
    let (target_outs, _) = model.unroll(target, seq);

    let rows = cells.len();
    let mut q = Matrix::zeros((rows, n));
    let mut q_next = Matrix::zeros((rows, n));
    let mut s = Matrix::zeros((rows, state_dim));
    let mut s_next = Matrix::zeros((rows, state_dim));
    let allowed: Vec<usize> = (0..AugmentedAction::COUNT).filter(|a| comm || a % 2 == 0).collect();
    for (k, &(t, g)) in cells.iter().enumerate() {
        for i in 0..n {
            let r = g * n + i;
            q[[k, i]] = outs[t][[r, batch.actions[t][r]]];
            let row = target_outs[t + 1].row(r);
            q_next[[k, i]] = row[greedy_index(row, allowed.iter().copied())];
        }
        s.row_mut(k).assign(&seq.states[t].row(g));
        s_next.row_mut(k).assign(&seq.states[t + 1].row(g));
    }
    let (q_tot, cache) = mixer.forward(ps, &q, &s);
    let next_tot = mixer.forward_only(target, &q_next, &s_next);
    let rewards: Vec<f64> = cells.iter().map(|&(t, g)| batch.team_rewards[t][g]).collect();
    let done: Vec<bool> = cells.iter().map(|&(t, g)| batch.done[t][g]).collect();
    let y = bellman_targets(&rewards, &done, &next_tot, gamma);

    let inv = 1.0 / rows as f64;
    let loss = q_tot.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * inv;
    let d_q_tot: Vec<f64> = q_tot.iter().zip(&y).map(|(a, b)| 2.0 * (a - b) * inv).collect();
    let dq = mixer.backward(ps, &cache, &d_q_tot);
    let mut d_outs: Vec<Matrix> = outs.iter().map(|o| Matrix::zeros(o.raw_dim())).collect();
    for (k, &(t, g)) in cells.iter().enumerate() {
        for i in 0..n {
            let r = g * n + i;
            d_outs[t][[r, batch.actions[t][r]]] += dq[[k, i]];
        }
    }
    model.unroll_backward(ps, &caches, &d_outs);
    Ok(loss)
}

/// Recurrent value-decomposition learner with episode replay and a
/// periodically copied target network.
#[derive(Debug, Clone)]
pub struct OffPolicyTrainer {
    cfg: TrainConfig,
    seed: u64,
    model: AgentModel,
    ps: ParamStore,
    target: ParamStore,
    buffer: ReplayBuffer,
    episodes: u64,
    env_steps: u64,
}

impl OffPolicyTrainer {
    pub fn new(cfg: TrainConfig, env: &dyn MarlEnv, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, u64::MAX));
        let (model, ps) = AgentModel::new(cfg.model_config(env), &mut rng)?;
        let target = ps.clone();
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            seed,
            model,
            ps,
            target,
            episodes: 0,
            env_steps: 0,
        })
    }

    pub fn target_params(&self) -> &ParamStore {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    fn comm(&self) -> bool {
        self.cfg.algorithm.uses_comm()
    }

    /// One gradient step on a uniformly sampled batch; `None` if the buffer is empty.
    pub fn update(&mut self, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let sample = self.buffer.sample(self.cfg.batch_size, rng);
        let batch = TrainBatch::from_episodes(&sample)?;
        let comm = self.comm();
        self.ps.zero_grads();
        let loss = offpolicy_loss_and_grad(&self.model, &mut self.ps, &self.target, &batch, self.cfg.gamma, comm)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("TD loss {loss} at episode {}", self.episodes)));
        }
        self.ps.clip_grad_norm(self.cfg.grad_clip);
        self.ps.adam_update(&self.cfg.adam())?;
        Ok(Some(loss))
    }
}

impl Learner for OffPolicyTrainer {
    fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn model(&self) -> &AgentModel {
        &self.model
    }

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn episodes_done(&self) -> u64 {
        self.episodes
    }

    fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn train_episode(&mut self, env: &mut dyn MarlEnv) -> Result<EpisodeReport> {
        let seed = episode_seed(self.seed, self.episodes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let epsilon = self.cfg.epsilon_at(self.env_steps);
        let head = HeadKind::Q { comm: self.comm() };
        let out = rollout_episode(env, &self.model, &self.ps, head, ActMode::EpsilonGreedy(epsilon), seed, &mut rng)?;
        self.env_steps += out.metrics.steps as u64;
        self.buffer.push(out.episode)?;
        let loss = self.update(&mut rng)?;
        self.episodes += 1;
        if self.episodes % self.cfg.target_update == 0 {
            self.target.copy_values_from(&self.ps)?;
        }
        Ok(EpisodeReport {
            episode: self.episodes - 1,
            env_steps: self.env_steps,
            metrics: out.metrics,
            loss,
            epsilon,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.add_store(ONLINE_PREFIX, &self.ps, true);
        ckpt.add_store(TARGET_PREFIX, &self.target, false);
        ckpt.push_scalar(EPISODES_KEY, self.episodes as f64);
        ckpt.push_scalar(ENV_STEPS_KEY, self.env_steps as f64);
        ckpt
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut ps = self.ps.clone();
        let mut target = self.target.clone();
        ckpt.load_store(ONLINE_PREFIX, &mut ps)?;
        ckpt.load_store(TARGET_PREFIX, &mut target)?;
        self.ps = ps;
        self.target = target;
        self.episodes = ckpt.scalar(EPISODES_KEY).unwrap_or(0.0) as u64;
        self.env_steps = ckpt.scalar(ENV_STEPS_KEY).unwrap_or(0.0) as u64;
        self.buffer.clear();
        Ok(())
    }
}
