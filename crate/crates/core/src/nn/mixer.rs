use rand::Rng;

use super::layers::{elu, elu_grad, Mlp, MlpCache};
use super::params::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Monotone mixing network: combines per-agent Q values into a joint value
/// using weights produced by hypernetworks from the global state.
///
/// ```text
/// hidden = elu(q · |W1(s)| + b1(s))      W1(s): n_agents x embed
/// Q_tot  = hidden · |w2(s)| + V(s)
/// ```
#[derive(Debug, Clone)]
pub struct Mixer {
    pub hyper_w1: Mlp,
    pub hyper_b1: Mlp,
    pub hyper_w2: Mlp,
    pub value: Mlp,
    pub n_agents: usize,
    pub embed: usize,
    pub state_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MixerCache {
    q: Matrix,
    w1_raw: Matrix,
    w2_raw: Matrix,
    pre: Matrix,
    hidden: Matrix,
    c_w1: MlpCache,
    c_b1: MlpCache,
    c_w2: MlpCache,
    c_v: MlpCache,
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_agents == 0 || state_dim == 0 || embed == 0 || hyper_hidden == 0 {
            return Err(Error::Shape(format!(
                "{name}: mixer dimensions must be positive (agents {n_agents}, state {state_dim}, embed {embed})"
            )));
        }
        Ok(Self {
            hyper_w1: Mlp::new(ps, &format!("{name}.hyper_w1"), &[state_dim, hyper_hidden, n_agents * embed], rng)?,
            hyper_b1: Mlp::new(ps, &format!("{name}.hyper_b1"), &[state_dim, embed], rng)?,
            hyper_w2: Mlp::new(ps, &format!("{name}.hyper_w2"), &[state_dim, hyper_hidden, embed], rng)?,
            value: Mlp::new(ps, &format!("{name}.value"), &[state_dim, embed, 1], rng)?,
            n_agents,
            embed,
            state_dim,
        })
    }

    /// `q`: rows x n_agents, `s`: rows x state_dim. Returns one Q_tot per row.
    pub fn forward(&self, ps: &ParamStore, q: &Matrix, s: &Matrix) -> (Vec<f64>, MixerCache) {
        assert_eq!(q.ncols(), self.n_agents, "mixer agent count");
        assert_eq!(s.ncols(), self.state_dim, "mixer state width");
        assert_eq!(q.nrows(), s.nrows(), "mixer rows");
        let rows = q.nrows();
        let (n, e) = (self.n_agents, self.embed);
        let (w1_raw, c_w1) = self.hyper_w1.forward(ps, s);
        let (b1, c_b1) = self.hyper_b1.forward(ps, s);
        let (w2_raw, c_w2) = self.hyper_w2.forward(ps, s);
        let (v, c_v) = self.value.forward(ps, s);

        let mut pre = b1;
        for r in 0..rows {
            for a in 0..n {
                let qa = q[[r, a]];
                for k in 0..e {
                    pre[[r, k]] += qa * w1_raw[[r, a * e + k]].abs();
                }
            }
        }
        let hidden = pre.mapv(elu);
        let q_tot = (0..rows)
            .map(|r| {
                let mut acc = v[[r, 0]];
                for k in 0..e {
                    acc += hidden[[r, k]] * w2_raw[[r, k]].abs();
                }
                acc
            })
            .collect();
        let cache = MixerCache {
            q: q.clone(),
            w1_raw,
            w2_raw,
            pre,
            hidden,
            c_w1,
            c_b1,
            c_w2,
            c_v,
        };
        (q_tot, cache)
    }

    /// Accumulate hypernetwork gradients; returns `dQ_tot/dq` scaled by the
    /// upstream gradient (rows x n_agents). State gradients are not needed.
    pub fn backward(&self, ps: &mut ParamStore, c: &MixerCache, dq_tot: &[f64]) -> Matrix {
        let rows = c.q.nrows();
        let (n, e) = (self.n_agents, self.embed);
        let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
        let mut d_w2 = Matrix::zeros((rows, e));
        let mut d_pre = Matrix::zeros((rows, e));
        let mut d_w1 = Matrix::zeros((rows, n * e));
        let mut dq = Matrix::zeros((rows, n));
        for r in 0..rows {
            let g = dq_tot[r];
            for k in 0..e {
                let w2 = c.w2_raw[[r, k]];
                d_w2[[r, k]] = g * c.hidden[[r, k]] * sign(w2);
                d_pre[[r, k]] = g * w2.abs() * elu_grad(c.pre[[r, k]]);
            }
            for a in 0..n {
                let mut acc = 0.0;
                for k in 0..e {
                    let w1 = c.w1_raw[[r, a * e + k]];
                    acc += d_pre[[r, k]] * w1.abs();
                    d_w1[[r, a * e + k]] = d_pre[[r, k]] * c.q[[r, a]] * sign(w1);
                }
                dq[[r, a]] = acc;
            }
        }
        let dv = Matrix::from_shape_vec((rows, 1), dq_tot.to_vec()).expect("one value per row");
        self.value.backward(ps, &c.c_v, &dv, false);
        self.hyper_w2.backward(ps, &c.c_w2, &d_w2, false);
        self.hyper_b1.backward(ps, &c.c_b1, &d_pre, false);
        self.hyper_w1.backward(ps, &c.c_w1, &d_w1, false);
        dq
    }

    pub fn forward_only(&self, ps: &ParamStore, q: &Matrix, s: &Matrix) -> Vec<f64> {
        self.forward(ps, q, s).0
    }
}
