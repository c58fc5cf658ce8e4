#![allow(dead_code)]

use marlcomm_core::codec::Delivery;
use marlcomm_core::nn::Matrix;
use marlcomm_core::trainer::{
    AlgorithmKind, BanditEnv, Learner, OffPolicyTrainer, OnPolicyTrainer, TrainConfig, POLICY_OUTPUTS,
};

pub const BANDIT_REWARDS: [f64; 10] = [0.1, 0.5, -0.3, 1.0, 0.0, 0.2, -0.5, 0.8, 0.3, -0.1];

pub fn bandit_cfg(algorithm: AlgorithmKind) -> TrainConfig {
    TrainConfig {
        algorithm,
        eps_start: 1.0,
        eps_end: 1.0,
        lr: 5e-3,
        batch_size: 32,
        buffer_capacity: 256,
        target_update: 50,
        hidden: 16,
        msg_dim: 4,
        enc_out: 4,
        enc_hidden: 8,
        mixer_embed: 8,
        hyper_hidden: 8,
        ..TrainConfig::default()
    }
}

pub fn step_outputs(learner: &dyn Learner) -> Matrix {
    let model = learner.model();
    let (out, _) = model.step(
        learner.params(),
        &Matrix::from_elem((1, 1), 1.0),
        &model.zero_payload(1),
        &Delivery::none(1, 1),
        &model.zero_hidden(1),
        &Matrix::zeros((1, 0)),
    );
    out.out
}

/// Mixed value of every joint action in the bandit's single state.
pub fn q_tot_all(tr: &OffPolicyTrainer) -> Vec<f64> {
    let q = step_outputs(tr);
    let mixer = tr.model().mixer().unwrap();
    (0..10)
        .map(|a| mixer.forward_only(tr.params(), &Matrix::from_elem((1, 1), q[[0, a]]), &Matrix::from_elem((1, 1), 1.0))[0])
        .collect()
}

pub fn optimal_probability(tr: &OnPolicyTrainer, best: usize) -> f64 {
    let z = step_outputs(tr);
    let softmax = |lo: usize, hi: usize, k: usize| {
        let m = (lo..hi).map(|j| z[[0, j]]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (lo..hi).map(|j| (z[[0, j]] - m).exp()).sum();
        (z[[0, k]] - m).exp() / total
    };
    let ng = POLICY_OUTPUTS - 2;
    softmax(0, ng, best / 2) * softmax(ng, POLICY_OUTPUTS, ng + best % 2)
}

/// Largest |Q_tot - r| over the bandit's joint actions after off-policy training.
pub fn offpolicy_bandit_error(seed: u64, episodes: usize) -> f64 {
    let mut env = BanditEnv::new(BANDIT_REWARDS);
    let mut tr = OffPolicyTrainer::new(bandit_cfg(AlgorithmKind::Offpolicy), &env, seed).unwrap();
    for _ in 0..episodes {
        tr.train_episode(&mut env).unwrap();
    }
    q_tot_all(&tr)
        .iter()
        .zip(BANDIT_REWARDS)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Optimal-action probability after every on-policy episode.
pub fn onpolicy_bandit_trace(seed: u64, episodes: usize) -> Vec<f64> {
    let mut env = BanditEnv::new(BANDIT_REWARDS);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        baseline_rate: 0.1,
        ..bandit_cfg(AlgorithmKind::Onpolicy)
    };
    let mut tr = OnPolicyTrainer::new(cfg, &env, seed).unwrap();
    let best = env.best_action();
    (0..episodes)
        .map(|_| {
            tr.train_episode(&mut env).unwrap();
            optimal_probability(&tr, best)
        })
        .collect()
}

/// Number of decreases of the `window`-episode moving average.
pub fn moving_average_drops(trace: &[f64], window: usize) -> usize {
    let ma: Vec<f64> = trace.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    ma.windows(2).filter(|w| w[1] < w[0]).count()
}
