use ndarray::ArrayView1;
use rand::Rng;
use serde::Serialize;

use crate::codec::Delivery;
use crate::error::{Error, Result};
use crate::grid::GameAction;
use crate::meta_env::AugmentedAction;
use crate::nn::{Matrix, ParamStore};

use super::env::{EnvFrame, MarlEnv};
use super::model::AgentModel;
use super::replay::Episode;

/// Episodes longer than this are treated as a broken environment.
const MAX_EPISODE_STEPS: usize = 100_000;

/// How the network's output row is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One Q value per joint action; without comm only silent actions are allowed.
    Q { comm: bool },
    /// Game logits then communication logits.
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActMode {
    Greedy,
    /// Uniform over allowed actions with this probability, greedy otherwise.
    /// Policy heads sample instead.
    EpsilonGreedy(f64),
    /// Sample from the policy heads; Q heads act greedily.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub steps: usize,
    pub reward: f64,
    /// Mean communication action over agents and steps.
    pub alpha: f64,
    /// Per step, the fraction of agents that broadcast.
    pub comm_per_step: Vec<f64>,
    pub first_catch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub episode: Episode,
    pub metrics: EpisodeMetrics,
    /// Network output at every step, `n x n_outputs`.
    pub outputs: Vec<Matrix>,
}

/// Index of the largest allowed entry; the lowest index wins ties.
pub fn greedy_index(row: ArrayView1<f64>, allowed: impl Iterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for a in allowed {
        match best {
            Some(b) if row[a] <= row[b] => {}
            _ => best = Some(a),
        }
    }
    best.expect("at least one allowed action")
}

fn allowed_q(comm: bool) -> impl Iterator<Item = usize> {
    (0..AugmentedAction::COUNT).step_by(if comm { 1 } else { 2 })
}

fn sample_softmax<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k;
        }
        u -= wk;
    }
    w.len() - 1
}

/// Joint action index chosen from one output row.
pub fn select_action<R: Rng + ?Sized>(row: ArrayView1<f64>, head: HeadKind, mode: ActMode, rng: &mut R) -> usize {
    match head {
        HeadKind::Q { comm } => {
            if let ActMode::EpsilonGreedy(eps) = mode {
                let explore = rng.gen::<f64>() < eps;
                let pick = rng.gen_range(0..AugmentedAction::COUNT);
                if explore {
                    return if comm { pick } else { pick & !1 };
                }
            }
            greedy_index(row, allowed_q(comm))
        }
        HeadKind::Policy => {
            let g = GameAction::COUNT;
            let slice = row.to_vec();
            let (game, comm) = match mode {
                ActMode::Greedy => (
                    greedy_index(row, 0..g),
                    greedy_index(row, g..g + 2) - g,
                ),
                _ => (sample_softmax(&slice[..g], rng), sample_softmax(&slice[g..g + 2], rng)),
            };
            2 * game + comm
        }
    }
}

fn rows_matrix(rows: &[Vec<f64>], width: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Shape(format!("row {i} has {} entries, expected {width}", r.len())));
        }
        m.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

struct FrameInputs {
    obs: Matrix,
    heads: Matrix,
    received: Vec<bool>,
    delivery: Delivery,
    prev_payload: Matrix,
}

fn frame_inputs(frame: &EnvFrame, model: &AgentModel, obs_dim: usize, head_dim: usize) -> Result<FrameInputs> {
    let n = frame.obs.len();
    let obs = rows_matrix(&frame.obs, obs_dim)?;
    let heads = rows_matrix(&frame.heads, head_dim)?;
    let delivery = Delivery::from_inboxes(&frame.inboxes);
    let mut received = vec![false; n * n];
    let mut prev_payload = model.zero_payload(n);
    for (r, inbox) in frame.inboxes.iter().enumerate() {
        for (s, p) in inbox.iter() {
            if s >= n || p.len() != prev_payload.ncols() {
                return Err(Error::Shape(format!(
                    "agent {r} received a {}-wide payload from sender {s}",
                    p.len()
                )));
            }
            received[r * n + s] = true;
            prev_payload.row_mut(s).assign(&ArrayView1::from(p));
        }
    }
    Ok(FrameInputs {
        obs,
        heads,
        received,
        delivery,
        prev_payload,
    })
}

/// Play one episode from `env.reset(seed)` with zeroed recurrent state.
pub fn rollout_episode<R: Rng + ?Sized>(
    env: &mut dyn MarlEnv,
    model: &AgentModel,
    ps: &ParamStore,
    head: HeadKind,
    mode: ActMode,
    seed: u64,
    rng: &mut R,
) -> Result<Rollout> {
    let n = env.n_agents();
    let (obs_dim, head_dim) = (env.obs_dim(), env.head_dim());
    if n != model.cfg.n_agents || obs_dim != model.cfg.obs_dim {
        return Err(Error::Shape(format!(
            "environment has {n} agents / {obs_dim} features, model expects {} / {}",
            model.cfg.n_agents, model.cfg.obs_dim
        )));
    }
    let mut frame = env.reset(seed)?;
    let mut ep = Episode {
        n,
        obs: vec![],
        heads: vec![],
        received: vec![],
        states: vec![],
        actions: vec![],
        team_rewards: vec![],
        agent_rewards: vec![],
        done: vec![],
    };
    let mut outputs = vec![];
    let mut comm_per_step = vec![];
    let mut h = model.zero_hidden(n);
    loop {
        let inputs = frame_inputs(&frame, model, obs_dim, head_dim)?;
        let (out, _) = model.step(ps, &inputs.obs, &inputs.prev_payload, &inputs.delivery, &h, &inputs.heads);
        ep.obs.push(inputs.obs);
        ep.heads.push(inputs.heads);
        ep.received.push(inputs.received);
        ep.states.push(std::mem::take(&mut frame.state));
        let idx: Vec<usize> = (0..n).map(|i| select_action(out.out.row(i), head, mode, rng)).collect();
        let actions: Vec<AugmentedAction> = idx
            .iter()
            .map(|&a| AugmentedAction::from_index(a).expect("index within the joint action space"))
            .collect();
        let payloads: Vec<Option<Vec<f64>>> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| match (&out.payload, a.comm) {
                (Some(p), true) => Some(p.row(i).to_vec()),
                _ => None,
            })
            .collect();
        comm_per_step.push(actions.iter().filter(|a| a.comm).count() as f64 / n as f64);
        let tr = env.step(&actions, &payloads)?;
        ep.actions.push(idx);
        ep.team_rewards.push(tr.team_reward);
        ep.agent_rewards.push(tr.rewards);
        ep.done.push(tr.done);
        outputs.push(out.out);
        h = out.h;
        frame = tr.frame;
        if tr.done {
            break;
        }
        if ep.actions.len() >= MAX_EPISODE_STEPS {
            return Err(Error::Contract(format!("episode exceeded {MAX_EPISODE_STEPS} steps")));
        }
    }
    let last = frame_inputs(&frame, model, obs_dim, head_dim)?;
    ep.obs.push(last.obs);
    ep.heads.push(last.heads);
    ep.received.push(last.received);
    ep.states.push(frame.state);
    let steps = ep.len();
    let metrics = EpisodeMetrics {
        steps,
        reward: ep.team_rewards.iter().sum(),
        alpha: comm_per_step.iter().sum::<f64>() / steps as f64,
        comm_per_step,
        first_catch: env.first_catch(),
    };
    Ok(Rollout {
        episode: ep,
        metrics,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::EncoderKind;
    use crate::grid::PredatorPreyConfig;
    use crate::meta_env::{ChannelConfig, GameConfig, MetaEnv, MetaEnvConfig};
    use crate::trainer::model::{MixerDims, ModelConfig};
    use crate::trainer::replay::TrainBatch;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_pp_env() -> MetaEnv {
        let game = PredatorPreyConfig {
            n: 5,
            predators: 2,
            obstacle_len: 3,
            step_cap: 12,
            ..PredatorPreyConfig::default()
        };
        MetaEnv::new(MetaEnvConfig {
            game: GameConfig::PredatorPrey(game),
            channel: ChannelConfig::default(),
        })
        .unwrap()
    }

    fn small_model(env: &MetaEnv, comm: bool) -> (AgentModel, ParamStore) {
        let cfg = ModelConfig {
            n_agents: env.n_agents(),
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            head_dim: 2,
            hidden: 8,
            msg_dim: 5,
            enc_out: 4,
            enc_hidden: 6,
            encoder: EncoderKind::ConcatMlp,
            comm,
            n_outputs: 10,
            mixer: Some(MixerDims {
                embed: 4,
                hyper_hidden: 5,
            }),
        };
        AgentModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let row = array![0.0, 3.0, 1.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(greedy_index(row.view(), 0..10), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(row.view(), HeadKind::Q { comm: true }, ActMode::Greedy, &mut rng), 1);
        assert_eq!(select_action(row.view(), HeadKind::Q { comm: false }, ActMode::Greedy, &mut rng), 4);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let row = Matrix::zeros((1, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        for _ in 0..20_000 {
            counts[select_action(row.row(0), HeadKind::Q { comm: true }, ActMode::EpsilonGreedy(1.0), &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 2_000.0 - 1.0).abs() < 0.1, "{counts:?}");
        }
        for _ in 0..200 {
            let a = select_action(row.row(0), HeadKind::Q { comm: false }, ActMode::EpsilonGreedy(1.0), &mut rng);
            assert_eq!(a % 2, 0);
        }
    }

    #[test]
    fn policy_greedy_combines_both_heads() {
        let row = array![0.0, 0.0, 2.0, 0.0, 0.0, -1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(row.view(), HeadKind::Policy, ActMode::Greedy, &mut rng), 5);
    }

    #[test]
    fn untrained_episode_hits_the_step_cap_or_ends_early() {
        let mut env = small_pp_env();
        let (model, ps) = small_model(&env, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = rollout_episode(&mut env, &model, &ps, HeadKind::Q { comm: true }, ActMode::Greedy, 9, &mut rng).unwrap();
        assert!(out.metrics.steps <= 12);
        out.episode.validate().unwrap();
        assert_eq!(out.metrics.comm_per_step.len(), out.metrics.steps);
    }

    #[test]
    fn greedy_rollouts_are_deterministic() {
        let mut env = small_pp_env();
        let (model, ps) = small_model(&env, true);
        let run = |env: &mut MetaEnv| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            rollout_episode(env, &model, &ps, HeadKind::Q { comm: true }, ActMode::EpsilonGreedy(0.3), 4, &mut rng)
                .unwrap()
                .episode
        };
        let a = run(&mut env);
        let b = run(&mut env);
        assert_eq!(a, b);
    }

    #[test]
    fn replayed_unroll_reproduces_rollout_outputs() {
        let mut env = small_pp_env();
        let (model, ps) = small_model(&env, true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out =
            rollout_episode(&mut env, &model, &ps, HeadKind::Q { comm: true }, ActMode::EpsilonGreedy(0.5), 3, &mut rng)
                .unwrap();
        assert!(out.episode.received.iter().flatten().any(|&r| r), "some message should get through");
        let batch = TrainBatch::from_episodes(&[&out.episode]).unwrap();
        let (replayed, _) = model.unroll(&ps, &batch.seq);
        for (t, live) in out.outputs.iter().enumerate() {
            let diff = (live - &replayed[t]).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "step {t} differs by {diff}");
        }
    }
}
