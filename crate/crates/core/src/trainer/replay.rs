use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::codec::Delivery;
use crate::error::{Error, Result};
use crate::nn::Matrix;

use super::model::SeqBatch;

/// A finished trajectory. Frame-indexed fields hold `len + 1` entries: the
/// frame each action was taken in, plus the frame after the last action.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n: usize,
    /// Per frame, `n x obs_dim`.
    pub obs: Vec<Matrix>,
    /// Per frame, `n x head_dim`.
    pub heads: Vec<Matrix>,
    /// Per frame, `received[receiver * n + sender]`.
    pub received: Vec<Vec<bool>>,
    /// Per frame, mixing-network features.
    pub states: Vec<Vec<f64>>,
    /// Per step, joint action index of every agent.
    pub actions: Vec<Vec<usize>>,
    pub team_rewards: Vec<f64>,
    pub agent_rewards: Vec<Vec<f64>>,
    pub done: Vec<bool>,
}

/// Borrowed view of one step of an [`Episode`].
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub obs: &'a Matrix,
    pub received: &'a [bool],
    pub actions: &'a [usize],
    pub reward: f64,
    pub next_obs: &'a Matrix,
    pub next_received: &'a [bool],
    pub done: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transition(&self, t: usize) -> Transition<'_> {
        Transition {
            obs: &self.obs[t],
            received: &self.received[t],
            actions: &self.actions[t],
            reward: self.team_rewards[t],
            next_obs: &self.obs[t + 1],
            next_received: &self.received[t + 1],
            done: self.done[t],
        }
    }

    /// Consistency checks applied before an episode enters the buffer.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let frames_ok = self.obs.len() == t + 1
            && self.heads.len() == t + 1
            && self.received.len() == t + 1
            && self.states.len() == t + 1;
        let steps_ok = self.team_rewards.len() == t && self.agent_rewards.len() == t && self.done.len() == t;
        if !frames_ok || !steps_ok {
            return Err(Error::Contract(format!("episode of {t} steps has inconsistent field lengths")));
        }
        if t == 0 {
            return Err(Error::Contract("empty episode".into()));
        }
        if self.done[..t - 1].iter().any(|&d| d) || !self.done[t - 1] {
            return Err(Error::Contract("episode must end exactly at its only done flag".into()));
        }
        let shape = self.obs[0].dim();
        if self.obs.iter().any(|o| o.dim() != shape) || shape.0 != self.n {
            return Err(Error::Contract("observation shapes vary within an episode".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity store of finished episodes, evicting the oldest.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn get(&self, k: usize) -> Option<&Episode> {
        self.episodes.get(k)
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    /// Uniform sample of `batch` distinct episodes (all of them if fewer are stored).
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Episode> {
        let k = batch.min(self.episodes.len());
        index::sample(rng, self.episodes.len(), k)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect()
    }
}

/// Episodes padded to a common horizon, ready for unrolling. The sequence
/// has one more frame than the longest episode so that every transition's
/// successor frame is present.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub seq: SeqBatch,
    /// `actions[t][g * n + i]`; zero on padding.
    pub actions: Vec<Vec<usize>>,
    /// `team_rewards[t][g]`.
    pub team_rewards: Vec<Vec<f64>>,
    /// `agent_rewards[t][g * n + i]`.
    pub agent_rewards: Vec<Vec<f64>>,
    /// `done[t][g]`.
    pub done: Vec<Vec<bool>>,
}

impl TrainBatch {
    pub fn from_episodes(episodes: &[&Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Contract("cannot batch zero episodes".into()))?;
        let n = first.n;
        let (obs_dim, head_dim, state_dim) = (first.obs[0].ncols(), first.heads[0].ncols(), first.states[0].len());
        if episodes.iter().any(|e| e.n != n || e.obs[0].ncols() != obs_dim) {
            return Err(Error::Contract("episodes in a batch must share shapes".into()));
        }
        let groups = episodes.len();
        let horizon = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let frames = horizon + 1;
        let rows = groups * n;
        let mut seq = SeqBatch {
            groups,
            n,
            steps: frames,
            obs: vec![Matrix::zeros((rows, obs_dim)); frames],
            heads: vec![Matrix::zeros((rows, head_dim)); frames],
            delivery: vec![Delivery::none(groups, n); frames],
            states: vec![Matrix::zeros((groups, state_dim)); frames],
            valid: vec![vec![false; groups]; frames],
        };
        let mut actions = vec![vec![0; rows]; frames];
        let mut team_rewards = vec![vec![0.0; groups]; frames];
        let mut agent_rewards = vec![vec![0.0; rows]; frames];
        let mut done = vec![vec![false; groups]; frames];
        for (g, ep) in episodes.iter().enumerate() {
            for f in 0..=ep.len() {
                let block = g * n..(g + 1) * n;
                seq.obs[f].slice_mut(ndarray::s![block.clone(), ..]).assign(&ep.obs[f]);
                seq.heads[f].slice_mut(ndarray::s![block, ..]).assign(&ep.heads[f]);
                for r in 0..n {
                    for s in 0..n {
                        if ep.received[f][r * n + s] {
                            seq.delivery[f].set(g, r, s, true);
                        }
                    }
                }
                for (k, &v) in ep.states[f].iter().enumerate() {
                    seq.states[f][[g, k]] = v;
                }
            }
            for t in 0..ep.len() {
                seq.valid[t][g] = true;
                team_rewards[t][g] = ep.team_rewards[t];
                done[t][g] = ep.done[t];
                for i in 0..n {
                    actions[t][g * n + i] = ep.actions[t][i];
                    agent_rewards[t][g * n + i] = ep.agent_rewards[t][i];
                }
            }
        }
        Ok(Self {
            seq,
            actions,
            team_rewards,
            agent_rewards,
            done,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Synthetic episode of `len` steps whose observations encode `tag`.
    pub(crate) fn toy_episode(n: usize, len: usize, tag: f64) -> Episode {
        Episode {
            n,
            obs: (0..=len).map(|f| Matrix::from_elem((n, 2), tag + f as f64)).collect(),
            heads: vec![Matrix::zeros((n, 1)); len + 1],
            received: (0..=len).map(|f| (0..n * n).map(|k| f > 0 && k % (n + 1) != 0).collect()).collect(),
            states: vec![vec![tag; 3]; len + 1],
            actions: vec![vec![1; n]; len],
            team_rewards: (0..len).map(|t| t as f64).collect(),
            agent_rewards: vec![vec![0.5; n]; len],
            done: (0..len).map(|t| t + 1 == len).collect(),
        }
    }

    #[test]
    fn eviction_is_oldest_first() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..5 {
            buf.push(toy_episode(2, 2, k as f64)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let tags: Vec<f64> = (0..3).map(|k| buf.get(k).unwrap().obs[0][[0, 0]]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfinished_episodes_are_rejected() {
        let mut ep = toy_episode(2, 3, 0.0);
        ep.done[2] = false;
        assert!(ReplayBuffer::new(4).push(ep).is_err());
        let mut ep = toy_episode(2, 3, 0.0);
        ep.done[0] = true;
        assert!(ReplayBuffer::new(4).push(ep).is_err());
    }

    #[test]
    fn sample_is_distinct_and_bounded() {
        let mut buf = ReplayBuffer::new(10);
        for k in 0..6 {
            buf.push(toy_episode(1, 1, k as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let got = buf.sample(4, &mut rng);
        let mut tags: Vec<i64> = got.iter().map(|e| e.obs[0][[0, 0]] as i64).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 4);
        assert_eq!(buf.sample(50, &mut rng).len(), 6);
    }

    #[test]
    fn batch_pads_shorter_episodes() {
        let a = toy_episode(2, 3, 10.0);
        let b = toy_episode(2, 1, 20.0);
        let batch = TrainBatch::from_episodes(&[&a, &b]).unwrap();
        assert_eq!(batch.seq.steps, 4);
        assert_eq!(batch.seq.valid[0], vec![true, true]);
        assert_eq!(batch.seq.valid[1], vec![true, false]);
        assert_eq!(batch.seq.valid[3], vec![false, false]);
        // successor frame of b's last step is kept, later frames are zero
        assert_eq!(batch.seq.obs[1][[2, 0]], 21.0);
        assert_eq!(batch.seq.obs[2][[2, 0]], 0.0);
        assert!(batch.seq.delivery[1].get(1, 0, 1));
        assert!(!batch.seq.delivery[2].get(1, 0, 1));
        assert!(batch.done[0][1] && !batch.done[0][0] && batch.done[2][0]);
        assert_eq!(batch.seq.states[3][[0, 0]], 10.0);
    }

    #[test]
    fn transition_view_links_successor() {
        let ep = toy_episode(2, 2, 0.0);
        let tr = ep.transition(1);
        assert_eq!(tr.next_obs[[0, 0]], 2.0);
        assert!(tr.done);
        assert_eq!(tr.reward, 1.0);
    }
}
