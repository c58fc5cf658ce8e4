use marlcomm_core::codec::{Delivery, EncoderConfig, EncoderKind, Inbox, MessageEncoder};
use marlcomm_core::config::ExperimentConfig;
use marlcomm_core::nn::{Matrix, Mixer, ParamStore};
use marlcomm_core::trainer::{discounted_returns, ReplayBuffer};
use marlcomm_core::wireless::{arbitrate, compute_rss, ChannelParams, OutcomeKind};
use marlcomm_core::Pos;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sum_encoder(seed: u64, l: usize) -> (ParamStore, MessageEncoder) {
    let mut ps = ParamStore::new();
    let cfg = EncoderConfig {
        kind: EncoderKind::SumMlp,
        msg_dim: l,
        out_dim: 6,
        hidden: 10,
        n_agents: 6,
    };
    let enc = MessageEncoder::new(&mut ps, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (ps, enc)
}

fn payloads(l: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, l), 0..6)
}

proptest! {
    #[test]
    fn sum_encoding_ignores_sender_labels(seed in 0u64..50, msgs in payloads(3), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let (ps, enc) = sum_encoder(seed, 3);
        let mut a = Inbox::new();
        let mut b = Inbox::new();
        for (k, m) in msgs.iter().enumerate() {
            a.insert(k, m.clone());
            b.insert(perm[k], m.clone());
        }
        let ea = enc.encode(&ps, &a).unwrap();
        let eb = enc.encode(&ps, &b).unwrap();
        prop_assert!(ea.iter().zip(&eb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn batched_sum_encoding_matches_single(seed in 0u64..50, rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4), mask in prop::collection::vec(any::<bool>(), 16)) {
        let (ps, enc) = sum_encoder(seed, 3);
        let n = 4;
        let payload = Matrix::from_shape_fn((n, 3), |(i, k)| rows[i][k]);
        let mut delivery = Delivery::none(1, n);
        for r in 0..n {
            for s in 0..n {
                delivery.set(0, r, s, r != s && mask[r * n + s]);
            }
        }
        let (batch, _) = enc.encode_batch(&ps, &payload, &delivery);
        for r in 0..n {
            let mut inbox = Inbox::new();
            for s in (0..n).filter(|&s| delivery.get(0, r, s)) {
                inbox.insert(s, rows[s].clone());
            }
            let single = enc.encode(&ps, &inbox).unwrap();
            for (k, v) in single.iter().enumerate() {
                prop_assert!((v - batch[[r, k]]).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn mixed_value_is_monotone_in_each_agent(seed in 0u64..1000, q in prop::collection::vec(-20.0f64..20.0, 3), s in prop::collection::vec(-2.0f64..2.0, 4), agent in 0usize..3, delta in 0.0f64..10.0) {
        let mut ps = ParamStore::new();
        let mixer = Mixer::new(&mut ps, "mix", 3, 4, 5, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let q0 = Matrix::from_shape_vec((1, 3), q.clone()).unwrap();
        let mut q1 = q0.clone();
        q1[[0, agent]] += delta;
        let st = Matrix::from_shape_vec((1, 4), s).unwrap();
        prop_assert!(mixer.forward_only(&ps, &q1, &st)[0] >= mixer.forward_only(&ps, &q0, &st)[0]);
    }

    #[test]
    fn rss_never_increases_with_distance(x in 0i32..40, extra in 0i32..40, fading in -6.0f64..6.0) {
        let p = ChannelParams::default();
        let near = compute_rss(Pos::new(0, 0), Pos::new(x, 0), &[], &p, fading);
        let far = compute_rss(Pos::new(0, 0), Pos::new(x + extra, 0), &[], &p, fading);
        prop_assert!(far <= near);
    }

    #[test]
    fn interference_never_helps_reception(signal in -110.0f64..-20.0, i_lo in -130.0f64..-40.0, bump in 0.0f64..30.0) {
        let p = ChannelParams::default();
        let rank = |o: OutcomeKind| match o {
            OutcomeKind::Undetected => 0,
            OutcomeKind::SensedOnly => 1,
            OutcomeKind::Received => 2,
        };
        let clean = arbitrate(signal, None, &p);
        let weak = arbitrate(signal, Some(i_lo), &p);
        let strong = arbitrate(signal, Some(i_lo + bump), &p);
        prop_assert!(rank(clean) >= rank(weak));
        prop_assert!(rank(weak) >= rank(strong));
    }

    #[test]
    fn config_overrides_survive_a_toml_round_trip(lr in 1e-5f64..1e-1, gamma in 0.0f64..1.0, slots in 1u32..40, seeds in prop::collection::btree_set(0u64..1000, 1..5)) {
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let ovs = vec![
            format!("trainer.lr={lr:e}"),
            format!("trainer.gamma={gamma:?}"),
            format!("channel.mac.slots_per_step={slots}"),
            format!("run.seeds=[{}]", seeds.join(",")),
        ];
        let cfg = ExperimentConfig::default().with_overrides(&ovs).unwrap();
        prop_assert_eq!(cfg.trainer.lr, lr);
        prop_assert_eq!(cfg.channel.mac.slots_per_step, slots);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn discounted_returns_satisfy_the_recursion(rewards in prop::collection::vec(-5.0f64..5.0, 1..30), gamma in 0.0f64..1.0) {
        let g = discounted_returns(&rewards, gamma);
        prop_assert_eq!(g.len(), rewards.len());
        prop_assert!((g[g.len() - 1] - rewards[rewards.len() - 1]).abs() < 1e-12);
        for t in 0..rewards.len() - 1 {
            prop_assert!((g[t] - (rewards[t] + gamma * g[t + 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn replay_never_exceeds_capacity(cap in 1usize..8, pushes in 0usize..20, batch in 1usize..10, seed in any::<u64>()) {
        let mut buf = ReplayBuffer::new(cap);
        for _ in 0..pushes {
            buf.push(tiny_episode()).unwrap();
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        let picked = buf.sample(batch, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(picked.len(), batch.min(buf.len()));
    }
}

fn tiny_episode() -> marlcomm_core::trainer::Episode {
    marlcomm_core::trainer::Episode {
        n: 1,
        obs: vec![Matrix::zeros((1, 1)); 2],
        heads: vec![Matrix::zeros((1, 0)); 2],
        received: vec![vec![false]; 2],
        states: vec![vec![0.0]; 2],
        actions: vec![vec![0]],
        team_rewards: vec![0.0],
        agent_rewards: vec![vec![0.0]],
        done: vec![true],
    }
}
