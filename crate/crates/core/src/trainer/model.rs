use ndarray::{concatenate, s, Axis, Zip};
use rand::Rng;

use crate::codec::{Delivery, EncodeCache, EncoderConfig, EncoderKind, MessageEncoder};
use crate::error::{Error, Result};
use crate::nn::{relu, Dense, GruCache, GruCell, Matrix, Mixer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerDims {
    pub embed: usize,
    pub hyper_hidden: usize,
}

/// Shapes of the shared per-agent network and, for value decomposition,
/// the mixing network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// Environment-supplied payload prefix (sender position).
    pub head_dim: usize,
    pub hidden: usize,
    /// Payload length, including the environment head.
    pub msg_dim: usize,
    pub enc_out: usize,
    pub enc_hidden: usize,
    pub encoder: EncoderKind,
    /// Without communication the network has no encoder or payload projection.
    pub comm: bool,
    pub n_outputs: usize,
    pub mixer: Option<MixerDims>,
}

/// Agent network shared by all agents (agent identity is a one-hot input):
///
/// ```text
/// x   = [obs ‖ encode(inbox) ‖ one_hot(agent)]
/// h'  = GRU(relu(fc1 x), h)
/// out = head(h')                       Q values or policy logits
/// m   = [env head ‖ proj(h')]          outgoing payload
/// ```
#[derive(Debug, Clone)]
pub struct AgentModel {
    pub cfg: ModelConfig,
    fc1: Dense,
    gru: GruCell,
    head: Dense,
    proj: Option<Dense>,
    encoder: Option<MessageEncoder>,
    mixer: Option<Mixer>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub out: Matrix,
    pub h: Matrix,
    /// Outgoing payloads, one row per agent, when communication is enabled.
    pub payload: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
    gru: GruCache,
    h: Matrix,
    enc: Option<EncodeCache>,
}

/// Padded, time-major batch of episodes. Row `g * n + i` of every matrix is
/// agent `i` of episode `g`.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub groups: usize,
    pub n: usize,
    pub steps: usize,
    pub obs: Vec<Matrix>,
    pub heads: Vec<Matrix>,
    /// Inbox pattern at each step (messages sent one step earlier).
    pub delivery: Vec<Delivery>,
    /// Mixing-network features, one row per episode.
    pub states: Vec<Matrix>,
    /// `valid[t][g]`: episode `g` is still running at step `t`.
    pub valid: Vec<Vec<bool>>,
}

impl AgentModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        if cfg.n_agents == 0 || cfg.obs_dim == 0 || cfg.hidden == 0 || cfg.n_outputs == 0 {
            return Err(Error::Shape(format!("degenerate model dimensions {cfg:?}")));
        }
        if cfg.comm && cfg.msg_dim <= cfg.head_dim {
            return Err(Error::Config(format!(
                "message length {} must exceed the payload head ({})",
                cfg.msg_dim, cfg.head_dim
            )));
        }
        let mut ps = ParamStore::new();
        let encoder = if cfg.comm {
            let enc_cfg = EncoderConfig {
                kind: cfg.encoder,
                msg_dim: cfg.msg_dim,
                out_dim: cfg.enc_out,
                hidden: cfg.enc_hidden,
                n_agents: cfg.n_agents,
            };
            Some(MessageEncoder::new(&mut ps, "encoder", enc_cfg, rng)?)
        } else {
            None
        };
        let input = cfg.obs_dim + if cfg.comm { cfg.enc_out } else { 0 } + cfg.n_agents;
        let fc1 = Dense::new(&mut ps, "agent.fc1", input, cfg.hidden, rng)?;
        let gru = GruCell::new(&mut ps, "agent.gru", cfg.hidden, cfg.hidden, rng)?;
        let head = Dense::new(&mut ps, "agent.head", cfg.hidden, cfg.n_outputs, rng)?;
        let proj = if cfg.comm {
            Some(Dense::new(&mut ps, "agent.msg", cfg.hidden, cfg.msg_dim - cfg.head_dim, rng)?)
        } else {
            None
        };
        let mixer = match cfg.mixer {
            Some(d) => Some(Mixer::new(
                &mut ps,
                "mixer",
                cfg.n_agents,
                cfg.state_dim,
                d.embed,
                d.hyper_hidden,
                rng,
            )?),
            None => None,
        };
        Ok((
            Self {
                cfg,
                fc1,
                gru,
                head,
                proj,
                encoder,
                mixer,
            },
            ps,
        ))
    }

    pub fn mixer(&self) -> Option<&Mixer> {
        self.mixer.as_ref()
    }

    pub fn zero_hidden(&self, rows: usize) -> Matrix {
        Matrix::zeros((rows, self.cfg.hidden))
    }

    pub fn zero_payload(&self, rows: usize) -> Matrix {
        Matrix::zeros((rows, self.cfg.msg_dim))
    }

    /// One recurrent step for `groups` teams at once.
    pub fn step(
        &self,
        ps: &ParamStore,
        obs: &Matrix,
        prev_payload: &Matrix,
        delivery: &Delivery,
        h_prev: &Matrix,
        heads: &Matrix,
    ) -> (StepOutput, StepCache) {
        let n = self.cfg.n_agents;
        let rows = obs.nrows();
        assert_eq!(rows % n, 0, "rows must cover whole teams");
        let one_hot = Matrix::from_shape_fn((rows, n), |(r, c)| if r % n == c { 1.0 } else { 0.0 });
        let (x, enc) = match &self.encoder {
            Some(encoder) => {
                let (phi, cache) = encoder.encode_batch(ps, prev_payload, delivery);
                (concatenate![Axis(1), *obs, phi, one_hot], Some(cache))
            }
            None => (concatenate![Axis(1), *obs, one_hot], None),
        };
        let pre = self.fc1.forward(ps, &x);
        let act = pre.mapv(relu);
        let (h, gru) = self.gru.forward(ps, &act, h_prev);
        let out = self.head.forward(ps, &h);
        let payload = self.proj.as_ref().map(|p| {
            let tail = p.forward(ps, &h);
            concatenate![Axis(1), *heads, tail]
        });
        let cache = StepCache {
            x,
            pre,
            act,
            gru,
            h: h.clone(),
            enc,
        };
        (StepOutput { out, h, payload }, cache)
    }

    /// Backward of [`step`](Self::step). `d_payload` is the gradient reaching
    /// this step's outgoing payload from the next step's encoder, `d_h` the
    /// gradient reaching the new hidden state from the next GRU step.
    /// Returns the gradients of the previous hidden state and of the
    /// previous step's payloads.
    pub fn step_backward(
        &self,
        ps: &mut ParamStore,
        c: &StepCache,
        d_out: &Matrix,
        d_payload: Option<&Matrix>,
        d_h: &Matrix,
    ) -> (Matrix, Option<Matrix>) {
        let mut dh = self.head.backward(ps, &c.h, d_out);
        dh += d_h;
        if let (Some(proj), Some(dp)) = (&self.proj, d_payload) {
            let d_tail = dp.slice(s![.., self.cfg.head_dim..]).to_owned();
            dh += &proj.backward(ps, &c.h, &d_tail);
        }
        let (mut da, dh_prev) = self.gru.backward(ps, &c.gru, &dh);
        Zip::from(&mut da).and(&c.pre).for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        debug_assert_eq!(c.act.shape(), da.shape());
        let d_prev_payload = match (&self.encoder, &c.enc) {
            (Some(encoder), Some(enc_cache)) => {
                let dx = self.fc1.backward(ps, &c.x, &da);
                let o = self.cfg.obs_dim;
                let dphi = dx.slice(s![.., o..o + self.cfg.enc_out]).to_owned();
                Some(encoder.backward_batch(ps, enc_cache, &dphi))
            }
            _ => {
                self.fc1.accumulate(ps, &c.x, &da);
                None
            }
        };
        (dh_prev, d_prev_payload)
    }

    /// Run the network over a whole batch from zero hidden state, feeding
    /// each step's payloads to the next step's encoder.
    pub fn unroll(&self, ps: &ParamStore, batch: &SeqBatch) -> (Vec<Matrix>, Vec<StepCache>) {
        let rows = batch.groups * batch.n;
        let mut h = self.zero_hidden(rows);
        let mut payload = self.zero_payload(rows);
        let mut outs = Vec::with_capacity(batch.steps);
        let mut caches = Vec::with_capacity(batch.steps);
        for t in 0..batch.steps {
            let (o, c) = self.step(ps, &batch.obs[t], &payload, &batch.delivery[t], &h, &batch.heads[t]);
            h = o.h;
            if let Some(p) = o.payload {
                payload = p;
            }
            outs.push(o.out);
            caches.push(c);
        }
        (outs, caches)
    }

    /// Backpropagate per-step output gradients through time and through the
    /// message path.
    pub fn unroll_backward(&self, ps: &mut ParamStore, caches: &[StepCache], d_outs: &[Matrix]) {
        assert_eq!(caches.len(), d_outs.len());
        let Some(first) = d_outs.first() else {
            return;
        };
        let rows = first.nrows();
        let mut d_h = self.zero_hidden(rows);
        let mut d_payload: Option<Matrix> = None;
        for t in (0..caches.len()).rev() {
            let (dh_prev, dp_prev) = self.step_backward(ps, &caches[t], &d_outs[t], d_payload.as_ref(), &d_h);
            d_h = dh_prev;
            d_payload = dp_prev;
        }
    }
}
