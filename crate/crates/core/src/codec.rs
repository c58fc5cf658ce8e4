//! Set encoders turning an agent's received messages into a fixed-size vector.
//!
//! [`EncoderKind::SumMlp`] applies a shared MLP to every payload and sums the
//! results, which is permutation invariant and, for suitable weights,
//! injective over multisets of bounded size. The other two kinds are
//! ablations: averaging raw payloads before the MLP, and an MLP over a
//! per-sender concatenation with zeros for missing senders.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Mlp, MlpCache, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    SumMlp,
    ConcatMlp,
    MeanMlp,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::SumMlp, EncoderKind::ConcatMlp, EncoderKind::MeanMlp];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::SumMlp => "sum_mlp",
            EncoderKind::ConcatMlp => "concat_mlp",
            EncoderKind::MeanMlp => "mean_mlp",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder {s:?} (expected sum_mlp, concat_mlp or mean_mlp)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Payload length `l`.
    pub msg_dim: usize,
    /// Output length `d'`.
    pub out_dim: usize,
    pub hidden: usize,
    /// Number of sender slots; only the concatenating encoder depends on it.
    pub n_agents: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.msg_dim == 0 || self.out_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive (msg {}, out {}, hidden {})",
                self.msg_dim, self.out_dim, self.hidden
            )));
        }
        if self.n_agents == 0 {
            return Err(Error::Config("encoder needs at least one sender slot".into()));
        }
        Ok(())
    }

    pub fn mlp_input_dim(&self) -> usize {
        match self.kind {
            EncoderKind::SumMlp | EncoderKind::MeanMlp => self.msg_dim,
            EncoderKind::ConcatMlp => self.msg_dim * self.n_agents,
        }
    }
}

/// Messages received by one agent, at most one per sender, kept in
/// ascending sender order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Inbox {
    entries: BTreeMap<usize, Vec<f64>>,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the payload this replaces, if the sender was already present.
    pub fn insert(&mut self, sender: usize, payload: Vec<f64>) -> Option<Vec<f64>> {
        self.entries.insert(sender, payload)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, sender: usize) -> bool {
        self.entries.contains_key(&sender)
    }

    pub fn get(&self, sender: usize) -> Option<&[f64]> {
        self.entries.get(&sender).map(Vec::as_slice)
    }

    pub fn senders(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries.iter().map(|(&s, p)| (s, p.as_slice()))
    }
}

impl FromIterator<(usize, Vec<f64>)> for Inbox {
    fn from_iter<I: IntoIterator<Item = (usize, Vec<f64>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Which receiver got which sender's message, for a batch of `groups`
/// independent `n`-agent teams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub groups: usize,
    pub n: usize,
    bits: Vec<bool>,
}

impl Delivery {
    pub fn none(groups: usize, n: usize) -> Self {
        Self {
            groups,
            n,
            bits: vec![false; groups * n * n],
        }
    }

    fn idx(&self, g: usize, receiver: usize, sender: usize) -> usize {
        (g * self.n + receiver) * self.n + sender
    }

    pub fn get(&self, g: usize, receiver: usize, sender: usize) -> bool {
        self.bits[self.idx(g, receiver, sender)]
    }

    pub fn set(&mut self, g: usize, receiver: usize, sender: usize, delivered: bool) {
        let i = self.idx(g, receiver, sender);
        self.bits[i] = delivered;
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Delivery pattern of a single team from its inboxes.
    pub fn from_inboxes(inboxes: &[Inbox]) -> Self {
        let n = inboxes.len();
        let mut d = Self::none(1, n);
        for (r, inbox) in inboxes.iter().enumerate() {
            for s in inbox.senders().filter(|&s| s < n) {
                d.set(0, r, s, true);
            }
        }
        d
    }

    fn senders_of(&self, g: usize, receiver: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&s| self.get(g, receiver, s))
    }
}

/// Sum that does not depend on the order of `vals`, so set aggregation is
/// bit-exactly permutation invariant.
pub fn order_free_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

/// Column-wise [`order_free_sum`] over the given rows of `m`.
fn sum_rows(m: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut scratch = vec![0.0; rows.len()];
    (0..m.ncols())
        .map(|k| {
            for (slot, &r) in scratch.iter_mut().zip(rows) {
                *slot = m[[r, k]];
            }
            order_free_sum(&mut scratch)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MessageEncoder {
    pub cfg: EncoderConfig,
    pub mlp: Mlp,
}

/// Forward state kept for [`MessageEncoder::backward_batch`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    delivery: Delivery,
    rows: usize,
    mlp: Option<MlpCache>,
}

impl MessageEncoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mlp = Mlp::new(ps, name, &[cfg.mlp_input_dim(), cfg.hidden, cfg.out_dim], rng)?;
        Ok(Self { cfg, mlp })
    }

    fn check_inbox(&self, inbox: &Inbox) -> Result<()> {
        for (s, p) in inbox.iter() {
            if p.len() != self.cfg.msg_dim {
                return Err(Error::Contract(format!(
                    "payload from sender {s} has length {}, expected {}",
                    p.len(),
                    self.cfg.msg_dim
                )));
            }
            if self.cfg.kind == EncoderKind::ConcatMlp && s >= self.cfg.n_agents {
                return Err(Error::Contract(format!(
                    "sender {s} has no slot among {} agents",
                    self.cfg.n_agents
                )));
            }
        }
        Ok(())
    }

    /// Rows fed to the MLP for one inbox.
    fn mlp_input(&self, inbox: &Inbox) -> Matrix {
        let l = self.cfg.msg_dim;
        match self.cfg.kind {
            EncoderKind::SumMlp => {
                let mut x = Matrix::zeros((inbox.len(), l));
                for (row, (_, p)) in inbox.iter().enumerate() {
                    for (k, v) in p.iter().enumerate() {
                        x[[row, k]] = *v;
                    }
                }
                x
            }
            EncoderKind::MeanMlp => {
                let mut x = Matrix::zeros((1, l));
                if !inbox.is_empty() {
                    let mut col = vec![0.0; inbox.len()];
                    for k in 0..l {
                        for (slot, (_, p)) in col.iter_mut().zip(inbox.iter()) {
                            *slot = p[k];
                        }
                        x[[0, k]] = order_free_sum(&mut col) / inbox.len() as f64;
                    }
                }
                x
            }
            EncoderKind::ConcatMlp => {
                let mut x = Matrix::zeros((1, l * self.cfg.n_agents));
                for (s, p) in inbox.iter() {
                    for (k, v) in p.iter().enumerate() {
                        x[[0, s * l + k]] = *v;
                    }
                }
                x
            }
        }
    }

    /// Encode one inbox.
    pub fn encode(&self, ps: &ParamStore, inbox: &Inbox) -> Result<Vec<f64>> {
        self.check_inbox(inbox)?;
        let d = self.cfg.out_dim;
        if self.cfg.kind == EncoderKind::SumMlp && inbox.is_empty() {
            return Ok(vec![0.0; d]);
        }
        let x = self.mlp_input(inbox);
        if self.cfg.kind != EncoderKind::SumMlp {
            return Ok(self.mlp.forward_only(ps, &x).row(0).to_vec());
        }
        // one MLP call per payload so each embedding depends on its payload alone
        let mut y = Matrix::zeros((x.nrows(), d));
        for r in 0..x.nrows() {
            let e = self.mlp.forward_only(ps, &x.slice(ndarray::s![r..r + 1, ..]).to_owned());
            y.row_mut(r).assign(&e.row(0));
        }
        Ok(sum_rows(&y, &(0..y.nrows()).collect::<Vec<_>>()))
    }

    /// Accumulate parameter gradients of `upstream · encode(inbox)` and return
    /// the gradient with respect to each payload.
    pub fn encode_backward(
        &self,
        ps: &mut ParamStore,
        inbox: &Inbox,
        upstream: &[f64],
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        self.check_inbox(inbox)?;
        if upstream.len() != self.cfg.out_dim {
            return Err(Error::Contract(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.cfg.out_dim
            )));
        }
        let mut grads = BTreeMap::new();
        if self.cfg.kind == EncoderKind::SumMlp && inbox.is_empty() {
            return Ok(grads);
        }
        let x = self.mlp_input(inbox);
        let (_, cache) = self.mlp.forward(ps, &x);
        let dy = Matrix::from_shape_fn((x.nrows(), self.cfg.out_dim), |(_, k)| upstream[k]);
        let dx = self.mlp.backward(ps, &cache, &dy, true).expect("input gradient requested");
        let l = self.cfg.msg_dim;
        for (row, (s, _)) in inbox.iter().enumerate() {
            let g: Vec<f64> = match self.cfg.kind {
                EncoderKind::SumMlp => dx.row(row).to_vec(),
                EncoderKind::MeanMlp => dx.row(0).iter().map(|v| v / inbox.len() as f64).collect(),
                EncoderKind::ConcatMlp => dx.row(0).iter().skip(s * l).take(l).copied().collect(),
            };
            grads.insert(s, g);
        }
        Ok(grads)
    }

    /// Encode every agent of `delivery.groups` teams at once. `payloads` row
    /// `g * n + j` is sender `j`'s payload in team `g`; the output row
    /// `g * n + i` is receiver `i`'s encoding.
    pub fn encode_batch(&self, ps: &ParamStore, payloads: &Matrix, delivery: &Delivery) -> (Matrix, EncodeCache) {
        let (n, l, d) = (delivery.n, self.cfg.msg_dim, self.cfg.out_dim);
        let rows = delivery.groups * n;
        assert_eq!(payloads.nrows(), rows, "one payload row per agent");
        assert_eq!(payloads.ncols(), l, "payload width");
        let mut cache = EncodeCache {
            delivery: delivery.clone(),
            rows,
            mlp: None,
        };
        let mut out = Matrix::zeros((rows, d));
        match self.cfg.kind {
            EncoderKind::SumMlp => {
                if !delivery.any() {
                    return (out, cache);
                }
                let (e, c) = self.mlp.forward(ps, payloads);
                for g in 0..delivery.groups {
                    for i in 0..n {
                        let senders: Vec<usize> = delivery.senders_of(g, i).map(|j| g * n + j).collect();
                        if !senders.is_empty() {
                            out.row_mut(g * n + i).assign(&ndarray::Array1::from(sum_rows(&e, &senders)));
                        }
                    }
                }
                cache.mlp = Some(c);
            }
            EncoderKind::MeanMlp => {
                let mut x = Matrix::zeros((rows, l));
                for g in 0..delivery.groups {
                    for i in 0..n {
                        let senders: Vec<usize> = delivery.senders_of(g, i).map(|j| g * n + j).collect();
                        if senders.is_empty() {
                            continue;
                        }
                        let k = senders.len() as f64;
                        let mean = ndarray::Array1::from(sum_rows(payloads, &senders)) / k;
                        x.row_mut(g * n + i).assign(&mean);
                    }
                }
                let (y, c) = self.mlp.forward(ps, &x);
                out = y;
                cache.mlp = Some(c);
            }
            EncoderKind::ConcatMlp => {
                assert_eq!(n, self.cfg.n_agents, "concat encoder slot count");
                let mut x = Matrix::zeros((rows, n * l));
                for g in 0..delivery.groups {
                    for i in 0..n {
                        for j in delivery.senders_of(g, i) {
                            for k in 0..l {
                                x[[g * n + i, j * l + k]] = payloads[[g * n + j, k]];
                            }
                        }
                    }
                }
                let (y, c) = self.mlp.forward(ps, &x);
                out = y;
                cache.mlp = Some(c);
            }
        }
        (out, cache)
    }

    /// Backward of [`encode_batch`](Self::encode_batch): accumulates
    /// parameter gradients and returns the payload gradients.
    pub fn backward_batch(&self, ps: &mut ParamStore, cache: &EncodeCache, dphi: &Matrix) -> Matrix {
        let del = &cache.delivery;
        let (n, l) = (del.n, self.cfg.msg_dim);
        let mut dp = Matrix::zeros((cache.rows, l));
        let Some(mlp_cache) = &cache.mlp else {
            return dp;
        };
        match self.cfg.kind {
            EncoderKind::SumMlp => {
                let mut de = Matrix::zeros(dphi.raw_dim());
                for g in 0..del.groups {
                    for i in 0..n {
                        for j in del.senders_of(g, i) {
                            let mut row = de.row_mut(g * n + j);
                            row += &dphi.row(g * n + i);
                        }
                    }
                }
                dp = self.mlp.backward(ps, mlp_cache, &de, true).expect("input gradient requested");
            }
            EncoderKind::MeanMlp => {
                let dx = self.mlp.backward(ps, mlp_cache, dphi, true).expect("input gradient requested");
                for g in 0..del.groups {
                    for i in 0..n {
                        let senders: Vec<usize> = del.senders_of(g, i).collect();
                        let k = senders.len() as f64;
                        for j in senders {
                            for c in 0..l {
                                dp[[g * n + j, c]] += dx[[g * n + i, c]] / k;
                            }
                        }
                    }
                }
            }
            EncoderKind::ConcatMlp => {
                let dx = self.mlp.backward(ps, mlp_cache, dphi, true).expect("input gradient requested");
                for g in 0..del.groups {
                    for i in 0..n {
                        for j in del.senders_of(g, i) {
                            for c in 0..l {
                                dp[[g * n + j, c]] += dx[[g * n + i, j * l + c]];
                            }
                        }
                    }
                }
            }
        }
        dp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(kind: EncoderKind, seed: u64) -> (ParamStore, MessageEncoder) {
        let mut ps = ParamStore::new();
        let cfg = EncoderConfig {
            kind,
            msg_dim: 3,
            out_dim: 4,
            hidden: 6,
            n_agents: 4,
        };
        let enc = MessageEncoder::new(&mut ps, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ps, enc)
    }

    fn random_inbox(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Inbox {
        let mut inbox = Inbox::new();
        for s in 0..n {
            if rng.gen_bool(0.6) {
                inbox.insert(s, (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
        }
        inbox
    }

    #[test]
    fn kind_strings_round_trip() {
        for k in EncoderKind::ALL {
            assert_eq!(k.as_str().parse::<EncoderKind>().unwrap(), k);
        }
        assert!("attention".parse::<EncoderKind>().is_err());
    }

    #[test]
    fn empty_sum_is_zero_and_empty_mean_is_constant() {
        let (ps, sum) = encoder(EncoderKind::SumMlp, 0);
        assert_eq!(sum.encode(&ps, &Inbox::new()).unwrap(), vec![0.0; 4]);
        let (ps, mean) = encoder(EncoderKind::MeanMlp, 0);
        let zero = mean.mlp.forward_only(&ps, &Matrix::zeros((1, 3)));
        assert_eq!(mean.encode(&ps, &Inbox::new()).unwrap(), zero.row(0).to_vec());
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in EncoderKind::ALL {
            let (ps, enc) = encoder(kind, 2);
            for _ in 0..50 {
                let mut items: Vec<(usize, Vec<f64>)> = random_inbox(&mut rng, 4, 3).iter().map(|(s, p)| (s, p.to_vec())).collect();
                let a = enc.encode(&ps, &items.iter().cloned().collect()).unwrap();
                items.shuffle(&mut rng);
                let b = enc.encode(&ps, &items.into_iter().collect()).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn wrong_payload_length_rejected() {
        let (ps, enc) = encoder(EncoderKind::SumMlp, 0);
        let inbox: Inbox = [(0, vec![1.0, 2.0])].into_iter().collect();
        assert!(matches!(enc.encode(&ps, &inbox), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_is_additive_over_disjoint_senders() {
        let (ps, enc) = encoder(EncoderKind::SumMlp, 3);
        let a: Inbox = [(0, vec![0.1, 0.2, 0.3])].into_iter().collect();
        let b: Inbox = [(2, vec![-0.4, 0.5, 0.0])].into_iter().collect();
        let ab: Inbox = a.iter().chain(b.iter()).map(|(s, p)| (s, p.to_vec())).collect();
        let (ea, eb, eab) = (enc.encode(&ps, &a).unwrap(), enc.encode(&ps, &b).unwrap(), enc.encode(&ps, &ab).unwrap());
        for k in 0..4 {
            assert_eq!(eab[k], ea[k] + eb[k]);
        }
    }

    fn grads_of(ps: &ParamStore) -> Vec<f64> {
        ps.ids().flat_map(|id| ps.grad(id).iter().copied().collect::<Vec<_>>()).collect()
    }

    #[test]
    fn empty_inbox_backward_is_zero() {
        let (mut ps, enc) = encoder(EncoderKind::SumMlp, 0);
        let g = enc.encode_backward(&mut ps, &Inbox::new(), &[1.0; 4]).unwrap();
        assert!(g.is_empty());
        assert!(grads_of(&ps).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_message_backward_is_plain_mlp_backward() {
        let (mut ps, enc) = encoder(EncoderKind::SumMlp, 4);
        let m = vec![0.3, -0.7, 0.9];
        let up = [0.5, -1.0, 0.25, 2.0];
        let inbox: Inbox = [(1, m.clone())].into_iter().collect();
        let got = enc.encode_backward(&mut ps, &inbox, &up).unwrap();
        let via_encoder = grads_of(&ps);
        ps.zero_grads();
        let x = Matrix::from_shape_vec((1, 3), m).unwrap();
        let (_, c) = enc.mlp.forward(&ps, &x);
        let dx = enc.mlp.backward(&mut ps, &c, &Matrix::from_shape_vec((1, 4), up.to_vec()).unwrap(), true).unwrap();
        assert_eq!(via_encoder, grads_of(&ps));
        assert_eq!(got[&1], dx.row(0).to_vec());
    }

    #[test]
    fn two_message_grads_are_sum_of_singles() {
        let (mut ps, enc) = encoder(EncoderKind::SumMlp, 5);
        let up = [1.0, -0.5, 0.3, 0.2];
        let a: Inbox = [(0, vec![0.1, 0.4, -0.2])].into_iter().collect();
        let b: Inbox = [(3, vec![-0.6, 0.2, 0.8])].into_iter().collect();
        let ab: Inbox = a.iter().chain(b.iter()).map(|(s, p)| (s, p.to_vec())).collect();
        enc.encode_backward(&mut ps, &a, &up).unwrap();
        enc.encode_backward(&mut ps, &b, &up).unwrap();
        let separate = grads_of(&ps);
        ps.zero_grads();
        enc.encode_backward(&mut ps, &ab, &up).unwrap();
        for (x, y) in separate.iter().zip(grads_of(&ps)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_single_inbox_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in EncoderKind::ALL {
            let (mut ps, enc) = encoder(kind, 7);
            let (groups, n, l) = (2, 4, 3);
            let payloads = Matrix::from_shape_simple_fn((groups * n, l), || rng.gen_range(-1.0..1.0));
            let mut del = Delivery::none(groups, n);
            for g in 0..groups {
                for i in 0..n {
                    for j in (0..n).filter(|&j| j != i) {
                        del.set(g, i, j, rng.gen_bool(0.5));
                    }
                }
            }
            let (phi, cache) = enc.encode_batch(&ps, &payloads, &del);
            let dphi = Matrix::from_shape_simple_fn(phi.raw_dim(), || rng.gen_range(-1.0..1.0));
            let dp = enc.backward_batch(&mut ps, &cache, &dphi);
            let batch_grads = grads_of(&ps);
            ps.zero_grads();

            let mut dp_single = Matrix::zeros(dp.raw_dim());
            for g in 0..groups {
                for i in 0..n {
                    let inbox: Inbox = (0..n)
                        .filter(|&j| del.get(g, i, j))
                        .map(|j| (j, payloads.row(g * n + j).to_vec()))
                        .collect();
                    let single = enc.encode(&ps, &inbox).unwrap();
                    for k in 0..4 {
                        assert!((single[k] - phi[[g * n + i, k]]).abs() < 1e-12, "{kind}");
                    }
                    let up: Vec<f64> = dphi.row(g * n + i).to_vec();
                    for (j, gj) in enc.encode_backward(&mut ps, &inbox, &up).unwrap() {
                        for c in 0..l {
                            dp_single[[g * n + j, c]] += gj[c];
                        }
                    }
                }
            }
            for (a, b) in batch_grads.iter().zip(grads_of(&ps)) {
                assert!((a - b).abs() < 1e-10, "{kind}");
            }
            for (a, b) in dp.iter().zip(dp_single.iter()) {
                assert!((a - b).abs() < 1e-12, "{kind}");
            }
        }
    }
}
