use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::GameAction;
use crate::nn::{Checkpoint, Matrix, ParamStore};

use super::env::MarlEnv;
use super::model::AgentModel;
use super::offpolicy::{ENV_STEPS_KEY, EPISODES_KEY, ONLINE_PREFIX};
use super::replay::{Episode, TrainBatch};
use super::rollout::{rollout_episode, ActMode, HeadKind};
use super::{episode_seed, EpisodeReport, Learner, ReturnMode, TrainConfig};

const BASELINE_KEY: &str = "trainer.baseline";

/// `G_t = r_t + gamma * G_{t+1}`, with `G` past the end equal to zero.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLoss {
    /// Surrogate `-(G - b) log pi`, averaged over episodes.
    pub loss: f64,
    /// Mean return over every agent-step in the batch.
    pub mean_return: f64,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// REINFORCE surrogate for a batch of complete episodes. Each agent's game
/// and communication log-probabilities are weighted by `G_t - baseline`,
/// where `G_t` is the team return or the agent's own return. Gradients are
/// accumulated into `ps`.
pub fn onpolicy_loss_and_grad(
    model: &AgentModel,
    ps: &mut ParamStore,
    batch: &TrainBatch,
    gamma: f64,
    mode: ReturnMode,
    baseline: f64,
) -> Result<PolicyLoss> {
    let seq = &batch.seq;
    let n = seq.n;
    let ng = GameAction::COUNT;
    if model.cfg.n_outputs != ng + 2 {
        return Err(Error::Contract(format!(
            "policy head needs {} outputs, model has {}",
            ng + 2,
            model.cfg.n_outputs
        )));
    }
    let len_of = |g: usize| (0..seq.steps).take_while(|&t| seq.valid[t][g]).count();
    let returns: Vec<Vec<Vec<f64>>> = (0..seq.groups)
        .map(|g| {
            let len = len_of(g);
            (0..n)
                .map(|i| {
                    let r: Vec<f64> = (0..len)
                        .map(|t| match mode {
                            ReturnMode::Team => batch.team_rewards[t][g],
                            ReturnMode::Individual => batch.agent_rewards[t][g * n + i],
                        })
                        .collect();
                    discounted_returns(&r, gamma)
                })
                .collect()
        })
        .collect();

    let (outs, caches) = model.unroll(ps, seq);
    let mut d_outs: Vec<Matrix> = outs.iter().map(|o| Matrix::zeros(o.raw_dim())).collect();
    let inv = 1.0 / seq.groups as f64;
    let (mut loss, mut ret_sum, mut count) = (0.0, 0.0, 0usize);
    for g in 0..seq.groups {
        for i in 0..n {
            let r = g * n + i;
            for (t, &ret) in returns[g][i].iter().enumerate() {
                let a = batch.actions[t][r];
                let (game, comm) = (a / 2, a % 2);
                let row = outs[t].row(r).to_vec();
                let lp_game = log_softmax(&row[..ng]);
                let lp_comm = log_softmax(&row[ng..]);
                let adv = ret - baseline;
                loss -= adv * (lp_game[game] + lp_comm[comm]) * inv;
                for (k, lp) in lp_game.iter().enumerate() {
                    let hit = if k == game { 1.0 } else { 0.0 };
                    d_outs[t][[r, k]] -= adv * inv * (hit - lp.exp());
                }
                for (k, lp) in lp_comm.iter().enumerate() {
                    let hit = if k == comm { 1.0 } else { 0.0 };
                    d_outs[t][[r, ng + k]] -= adv * inv * (hit - lp.exp());
                }
                ret_sum += ret;
                count += 1;
            }
        }
    }
    model.unroll_backward(ps, &caches, &d_outs);
    Ok(PolicyLoss {
        loss,
        mean_return: if count > 0 { ret_sum / count as f64 } else { 0.0 },
    })
}

/// REINFORCE with softmax game and communication heads and a running-mean
/// baseline. Episodes are collected with the current weights and discarded
/// after each update.
#[derive(Debug, Clone)]
pub struct OnPolicyTrainer {
    cfg: TrainConfig,
    seed: u64,
    model: AgentModel,
    ps: ParamStore,
    pending: Vec<Episode>,
    baseline: f64,
    episodes: u64,
    env_steps: u64,
}

impl OnPolicyTrainer {
    pub fn new(cfg: TrainConfig, env: &dyn MarlEnv, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, u64::MAX));
        let (model, ps) = AgentModel::new(cfg.model_config(env), &mut rng)?;
        Ok(Self {
            cfg,
            seed,
            model,
            ps,
            pending: vec![],
            baseline: 0.0,
            episodes: 0,
            env_steps: 0,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Episodes collected since the last update.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn update(&mut self) -> Result<f64> {
        let refs: Vec<&Episode> = self.pending.iter().collect();
        let batch = TrainBatch::from_episodes(&refs)?;
        let b = if self.cfg.baseline { self.baseline } else { 0.0 };
        self.ps.zero_grads();
        let out = onpolicy_loss_and_grad(&self.model, &mut self.ps, &batch, self.cfg.gamma, self.cfg.return_mode, b)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("policy loss {} at episode {}", out.loss, self.episodes)));
        }
        self.ps.clip_grad_norm(self.cfg.grad_clip);
        self.ps.adam_update(&self.cfg.adam())?;
        if self.cfg.baseline {
            self.baseline += self.cfg.baseline_rate * (out.mean_return - self.baseline);
        }
        self.pending.clear();
        Ok(out.loss)
    }
}

impl Learner for OnPolicyTrainer {
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
        let out = rollout_episode(env, &self.model, &self.ps, HeadKind::Policy, ActMode::Sample, seed, &mut rng)?;
        out.episode.validate()?;
        self.env_steps += out.metrics.steps as u64;
        self.pending.push(out.episode);
        let loss = if self.pending.len() >= self.cfg.batch_size {
            Some(self.update()?)
        } else {
            None
        };
        self.episodes += 1;
        Ok(EpisodeReport {
            episode: self.episodes - 1,
            env_steps: self.env_steps,
            metrics: out.metrics,
            loss,
            epsilon: 0.0,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.add_store(ONLINE_PREFIX, &self.ps, true);
        ckpt.push_scalar(EPISODES_KEY, self.episodes as f64);
        ckpt.push_scalar(ENV_STEPS_KEY, self.env_steps as f64);
        ckpt.push_scalar(BASELINE_KEY, self.baseline);
        ckpt
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut ps = self.ps.clone();
        ckpt.load_store(ONLINE_PREFIX, &mut ps)?;
        self.ps = ps;
        self.episodes = ckpt.scalar(EPISODES_KEY).unwrap_or(0.0) as u64;
        self.env_steps = ckpt.scalar(ENV_STEPS_KEY).unwrap_or(0.0) as u64;
        self.baseline = ckpt.scalar(BASELINE_KEY).unwrap_or(0.0);
        self.pending.clear();
        Ok(())
    }
}
