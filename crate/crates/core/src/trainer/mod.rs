//! Episode collection, replay and the two training algorithms.

mod env;
mod model;
mod offpolicy;
mod onpolicy;
mod replay;
mod rollout;

use serde::{Deserialize, Serialize};

use crate::codec::EncoderKind;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Checkpoint, ParamStore};

pub use env::{BanditEnv, EnvFrame, EnvTransition, MarlEnv};
pub use model::{AgentModel, MixerDims, ModelConfig, SeqBatch, StepCache, StepOutput};
pub use offpolicy::{bellman_targets, offpolicy_loss_and_grad, OffPolicyTrainer};
pub use onpolicy::{discounted_returns, onpolicy_loss_and_grad, OnPolicyTrainer, PolicyLoss};
pub use replay::{Episode, ReplayBuffer, TrainBatch, Transition};
pub use rollout::{greedy_index, rollout_episode, select_action, ActMode, EpisodeMetrics, HeadKind, Rollout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Offpolicy,
    Onpolicy,
    OffpolicyNocomm,
}

impl AlgorithmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::Offpolicy => "offpolicy",
            AlgorithmKind::Onpolicy => "onpolicy",
            AlgorithmKind::OffpolicyNocomm => "offpolicy_nocomm",
        }
    }

    pub fn uses_comm(self) -> bool {
        self != AlgorithmKind::OffpolicyNocomm
    }
}

/// Which return the on-policy gradient weights each agent's log-probability by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReturnMode {
    #[default]
    Team,
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: AlgorithmKind,
    pub encoder: EncoderKind,
    pub gamma: f64,
    pub lr: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which epsilon decays linearly.
    pub eps_anneal_steps: u64,
    /// Hard target copy period, in episodes.
    pub target_update: u64,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    /// Episodes per gradient step.
    pub batch_size: usize,
    pub episodes: u64,
    /// Evaluate every this many episodes; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub hidden: usize,
    pub msg_dim: usize,
    pub enc_out: usize,
    pub enc_hidden: usize,
    pub mixer_embed: usize,
    pub hyper_hidden: usize,
    pub grad_clip: f64,
    pub baseline: bool,
    pub baseline_rate: f64,
    pub return_mode: ReturnMode,
    /// Checkpoint every this many episodes; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmKind::Offpolicy,
            encoder: EncoderKind::SumMlp,
            gamma: 0.99,
            lr: 5e-4,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 50_000,
            target_update: 100,
            buffer_capacity: 2_000,
            batch_size: 8,
            episodes: 30_000,
            eval_every: 500,
            eval_episodes: 32,
            hidden: 128,
            msg_dim: 32,
            enc_out: 64,
            enc_hidden: 128,
            mixer_embed: 32,
            hyper_hidden: 64,
            grad_clip: 10.0,
            baseline: true,
            baseline_rate: 0.01,
            return_mode: ReturnMode::Team,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("trainer: {msg}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        for (name, e) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} {e} outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad(format!(
                "need 0 < batch_size ({}) <= buffer_capacity ({})",
                self.batch_size, self.buffer_capacity
            ));
        }
        if self.target_update == 0 {
            return bad("target_update must be positive".into());
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("msg_dim", self.msg_dim),
            ("enc_out", self.enc_out),
            ("enc_hidden", self.enc_hidden),
            ("mixer_embed", self.mixer_embed),
            ("hyper_hidden", self.hyper_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.baseline_rate) {
            return bad(format!("baseline_rate {} outside [0, 1]", self.baseline_rate));
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end`, flat afterwards.
    pub fn epsilon_at(&self, env_steps: u64) -> f64 {
        if self.eps_anneal_steps == 0 || env_steps >= self.eps_anneal_steps {
            return self.eps_end;
        }
        let frac = env_steps as f64 / self.eps_anneal_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn model_config(&self, env: &dyn MarlEnv) -> ModelConfig {
        let (n_outputs, mixer) = match self.algorithm {
            AlgorithmKind::Onpolicy => (POLICY_OUTPUTS, None),
            _ => (
                crate::meta_env::AugmentedAction::COUNT,
                Some(MixerDims {
                    embed: self.mixer_embed,
                    hyper_hidden: self.hyper_hidden,
                }),
            ),
        };
        ModelConfig {
            n_agents: env.n_agents(),
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            head_dim: env.head_dim(),
            hidden: self.hidden,
            msg_dim: self.msg_dim,
            enc_out: self.enc_out,
            enc_hidden: self.enc_hidden,
            encoder: self.encoder,
            comm: self.algorithm.uses_comm(),
            n_outputs,
            mixer,
        }
    }
}

/// Five game logits followed by two communication logits.
pub const POLICY_OUTPUTS: usize = crate::grid::GameAction::COUNT + 2;

/// Seed of the `episode`-th training episode of a run. Deriving it from the
/// run seed alone makes a resumed run replay the same environment draws.
pub fn episode_seed(run_seed: u64, episode: u64) -> u64 {
    splitmix64(run_seed ^ splitmix64(episode.wrapping_add(0x51_7c_c1_b7)))
}

/// Seeds of the fixed evaluation episodes.
pub fn eval_seed(run_seed: u64, k: u64) -> u64 {
    splitmix64(episode_seed(run_seed, k) ^ 0xe7a1_5eed_0000_0000)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Outcome of one training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub episode: u64,
    pub env_steps: u64,
    pub metrics: EpisodeMetrics,
    /// Loss of the gradient step taken after this episode, if any.
    pub loss: Option<f64>,
    pub epsilon: f64,
}

/// Greedy evaluation over a fixed set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    /// Mean communication action at each step index, over episodes still running.
    pub comm_curve: Vec<f64>,
    /// `first_catch_hist[t]`: episodes whose first success happened at step `t`.
    pub first_catch_hist: Vec<u64>,
}

impl EvalSummary {
    pub fn from_metrics(all: &[EpisodeMetrics]) -> Self {
        let stats = |f: &dyn Fn(&EpisodeMetrics) -> f64| -> (f64, f64) {
            if all.is_empty() {
                return (0.0, 0.0);
            }
            let k = all.len() as f64;
            let mean = all.iter().map(f).sum::<f64>() / k;
            let var = all.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / k;
            (mean, var.sqrt())
        };
        let (steps_mean, steps_std) = stats(&|m| m.steps as f64);
        let (reward_mean, reward_std) = stats(&|m| m.reward);
        let (alpha_mean, alpha_std) = stats(&|m| m.alpha);
        let horizon = all.iter().map(|m| m.comm_per_step.len()).max().unwrap_or(0);
        let comm_curve = (0..horizon)
            .map(|t| {
                let live: Vec<f64> = all.iter().filter_map(|m| m.comm_per_step.get(t).copied()).collect();
                live.iter().sum::<f64>() / live.len() as f64
            })
            .collect();
        let mut first_catch_hist = vec![0; horizon];
        for t in all.iter().filter_map(|m| m.first_catch) {
            if t >= first_catch_hist.len() {
                first_catch_hist.resize(t + 1, 0);
            }
            first_catch_hist[t] += 1;
        }
        Self {
            episodes: all.len(),
            steps_mean,
            steps_std,
            reward_mean,
            reward_std,
            alpha_mean,
            alpha_std,
            comm_curve,
            first_catch_hist,
        }
    }
}

/// What the harness needs from either training algorithm.
pub trait Learner: Send {
    fn config(&self) -> &TrainConfig;
    fn model(&self) -> &AgentModel;
    fn params(&self) -> &ParamStore;
    fn episodes_done(&self) -> u64;
    fn env_steps(&self) -> u64;
    fn train_episode(&mut self, env: &mut dyn MarlEnv) -> Result<EpisodeReport>;
    fn checkpoint(&self) -> Checkpoint;
    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()>;

    fn head_kind(&self) -> HeadKind {
        match self.config().algorithm {
            AlgorithmKind::Offpolicy => HeadKind::Q { comm: true },
            AlgorithmKind::OffpolicyNocomm => HeadKind::Q { comm: false },
            AlgorithmKind::Onpolicy => HeadKind::Policy,
        }
    }

    fn evaluate(&self, env: &mut dyn MarlEnv, run_seed: u64, episodes: usize) -> Result<EvalSummary> {
        evaluate(self.model(), self.params(), self.head_kind(), env, run_seed, episodes)
    }
}

pub fn evaluate(
    model: &AgentModel,
    ps: &ParamStore,
    head: HeadKind,
    env: &mut dyn MarlEnv,
    run_seed: u64,
    episodes: usize,
) -> Result<EvalSummary> {
    let mut all = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let seed = eval_seed(run_seed, k as u64);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let out = rollout_episode(env, model, ps, head, ActMode::Greedy, seed, &mut rng)?;
        all.push(out.metrics);
    }
    Ok(EvalSummary::from_metrics(&all))
}

pub fn build_learner(cfg: &TrainConfig, env: &dyn MarlEnv, seed: u64) -> Result<Box<dyn Learner>> {
    Ok(match cfg.algorithm {
        AlgorithmKind::Onpolicy => Box::new(OnPolicyTrainer::new(cfg.clone(), env, seed)?),
        _ => Box::new(OffPolicyTrainer::new(cfg.clone(), env, seed)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(25_000) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon_at(50_000), 0.05);
        assert_eq!(cfg.epsilon_at(10_000_000), 0.05);
    }

    #[test]
    fn validation_rejects_bad_gamma_and_batch() {
        let mut cfg = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
        cfg.gamma = 0.9;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 8;
        cfg.validate().unwrap();
    }

    #[test]
    fn episode_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|e| episode_seed(7, e)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(episode_seed(7, 0), episode_seed(8, 0));
        assert_ne!(episode_seed(7, 3), eval_seed(7, 3));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [AlgorithmKind::Offpolicy, AlgorithmKind::Onpolicy, AlgorithmKind::OffpolicyNocomm] {
            let s = serde_json::to_string(&a).unwrap();
            assert_eq!(s, format!("\"{}\"", a.as_str()));
            assert_eq!(serde_json::from_str::<AlgorithmKind>(&s).unwrap(), a);
        }
    }
}
