//! Shared fixtures for the criterion benches.

use marlcomm_core::codec::Delivery;
use marlcomm_core::config::ExperimentConfig;
use marlcomm_core::meta_env::MetaEnv;
use marlcomm_core::nn::Matrix;
use marlcomm_core::trainer::{Learner, OffPolicyTrainer};
use marlcomm_core::wireless::Packet;
use marlcomm_core::Pos;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

/// Every agent hears every other agent, in each of `groups` teams.
pub fn full_delivery(groups: usize, n: usize) -> Delivery {
    let mut d = Delivery::none(groups, n);
    for g in 0..groups {
        for r in 0..n {
            for s in (0..n).filter(|&s| s != r) {
                d.set(g, r, s, true);
            }
        }
    }
    d
}

/// `n` agents on a diagonal, all wanting to send a `msg_dim` payload.
pub fn radio_scene(n: usize, msg_dim: usize) -> (Vec<Option<Packet>>, Vec<Pos>) {
    let intents = (0..n)
        .map(|i| {
            Some(Packet {
                sender: i,
                payload: vec![0.5; msg_dim],
                tx_power_dbm: 20.0,
            })
        })
        .collect();
    let positions = (0..n as i32).map(|i| Pos::new(i, (i * 3) % 10)).collect();
    (intents, positions)
}

/// Default experiment configuration with `episodes` training episodes.
pub fn default_config(episodes: u64) -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[format!("trainer.episodes={episodes}")])
        .expect("default config is valid")
}

/// Off-policy trainer on the default predator-prey task whose replay buffer
/// already holds one batch of episodes.
pub fn warm_offpolicy(seed: u64) -> (OffPolicyTrainer, MetaEnv) {
    let cfg = default_config(100);
    let mut env = MetaEnv::new(cfg.meta_env_config()).expect("env");
    let mut tr = OffPolicyTrainer::new(cfg.trainer.clone(), &env, seed).expect("trainer");
    while tr.buffer().len() < cfg.trainer.batch_size {
        tr.train_episode(&mut env).expect("episode");
    }
    (tr, env)
}
