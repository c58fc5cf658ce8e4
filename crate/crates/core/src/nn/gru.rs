use ndarray::{concatenate, s, Axis, Zip};
use rand::Rng;

use super::layers::sigmoid;
use super::params::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Hidden state of one agent's recurrent cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub h: Vec<f64>,
}

impl GruState {
    pub fn zeros(dim: usize) -> Self {
        Self { h: vec![0.0; dim] }
    }
}

/// Gated recurrent unit over a batch of rows.
///
/// Gate columns are laid out `[reset | update | candidate]`:
///
/// ```text
/// r  = σ(x Wx_r + bx_r + h Wh_r + bh_r)
/// z  = σ(x Wx_z + bx_z + h Wh_z + bh_z)
/// n  = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n))
/// h' = (1 - z) ⊙ h + z ⊙ n
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Matrix,
    h: Matrix,
    r: Matrix,
    z: Matrix,
    n: Matrix,
    gh_n: Matrix,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Shape(format!("{name}: zero-sized GRU {input}->{hidden}")));
        }
        let bx_bound = 1.0 / (input as f64).sqrt();
        let bh_bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            wx: ps.add_uniform(&format!("{name}.wx"), input, 3 * hidden, bx_bound, rng)?,
            wh: ps.add_uniform(&format!("{name}.wh"), hidden, 3 * hidden, bh_bound, rng)?,
            bx: ps.add_uniform(&format!("{name}.bx"), 1, 3 * hidden, bx_bound, rng)?,
            bh: ps.add_uniform(&format!("{name}.bh"), 1, 3 * hidden, bh_bound, rng)?,
            input,
            hidden,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Matrix, h: &Matrix) -> (Matrix, GruCache) {
        assert_eq!(x.ncols(), self.input, "GRU input width");
        assert_eq!(h.ncols(), self.hidden, "GRU hidden width");
        assert_eq!(x.nrows(), h.nrows(), "GRU batch rows");
        let hd = self.hidden;
        let mut gx = x.dot(ps.value(self.wx));
        gx += ps.value(self.bx);
        let mut gh = h.dot(ps.value(self.wh));
        gh += ps.value(self.bh);

        let r = (&gx.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd])).mapv(sigmoid);
        let z = (&gx.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
        let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
        let n = (&gx.slice(s![.., 2 * hd..]) + &(&r * &gh_n)).mapv(f64::tanh);
        let mut h_new = Matrix::zeros(h.raw_dim());
        Zip::from(&mut h_new)
            .and(h)
            .and(&z)
            .and(&n)
            .for_each(|o, &hv, &zv, &nv| *o = (1.0 - zv) * hv + zv * nv);
        let cache = GruCache {
            x: x.clone(),
            h: h.clone(),
            r,
            z,
            n,
            gh_n,
        };
        (h_new, cache)
    }

    /// Given the gradient of the new state, accumulate weight gradients and
    /// return `(d input, d previous state)`.
    pub fn backward(&self, ps: &mut ParamStore, c: &GruCache, dh_new: &Matrix) -> (Matrix, Matrix) {
        let rows = dh_new.nrows();
        let hd = self.hidden;
        let mut dar = Matrix::zeros((rows, hd));
        let mut daz = Matrix::zeros((rows, hd));
        let mut dan = Matrix::zeros((rows, hd));
        let mut dgh_n = Matrix::zeros((rows, hd));
        let mut dh_prev = Matrix::zeros((rows, hd));
        for i in 0..rows {
            for j in 0..hd {
                let g = dh_new[[i, j]];
                let (r, z, n, h, ghn) = (c.r[[i, j]], c.z[[i, j]], c.n[[i, j]], c.h[[i, j]], c.gh_n[[i, j]]);
                let dz = g * (n - h);
                let dn = g * z;
                dh_prev[[i, j]] = g * (1.0 - z);
                let a_n = dn * (1.0 - n * n);
                let dr = a_n * ghn;
                dan[[i, j]] = a_n;
                dgh_n[[i, j]] = a_n * r;
                dar[[i, j]] = dr * r * (1.0 - r);
                daz[[i, j]] = dz * z * (1.0 - z);
            }
        }
        let dgx = concatenate![Axis(1), dar, daz, dan];
        let dgh = concatenate![Axis(1), dar, daz, dgh_n];

        *ps.grad_mut(self.wx) += &c.x.t().dot(&dgx);
        *ps.grad_mut(self.bx) += &dgx.sum_axis(Axis(0)).insert_axis(Axis(0));
        *ps.grad_mut(self.wh) += &c.h.t().dot(&dgh);
        *ps.grad_mut(self.bh) += &dgh.sum_axis(Axis(0)).insert_axis(Axis(0));

        let dx = dgx.dot(&ps.value(self.wx).t());
        dh_prev += &dgh.dot(&ps.value(self.wh).t());
        (dx, dh_prev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop reference cell.
    fn oracle(ps: &ParamStore, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = cell.hidden;
        let (wx, wh, bx, bh) = (ps.value(cell.wx), ps.value(cell.wh), ps.value(cell.bx), ps.value(cell.bh));
        let gate = |col: usize, use_h: bool| {
            let mut a = bx[[0, col]];
            for (i, xi) in x.iter().enumerate() {
                a += xi * wx[[i, col]];
            }
            let mut b = bh[[0, col]];
            for (i, hi) in h.iter().enumerate() {
                b += hi * wh[[i, col]];
            }
            if use_h {
                (a, b)
            } else {
                (a + b, 0.0)
            }
        };
        (0..hd)
            .map(|j| {
                let r = sigmoid(gate(j, false).0);
                let z = sigmoid(gate(hd + j, false).0);
                let (a, b) = gate(2 * hd + j, true);
                let n = (a + r * b).tanh();
                (1.0 - z) * h[j] + z * n
            })
            .collect()
    }

    fn cell(seed: u64, input: usize, hidden: usize) -> (ParamStore, GruCell) {
        let mut ps = ParamStore::new();
        let c = GruCell::new(&mut ps, "g", input, hidden, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ps, c)
    }

    #[test]
    fn random_step_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ps, g) = cell(1, 4, 5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (got, _) = g.forward(
                &ps,
                &Matrix::from_shape_vec((1, 4), x.clone()).unwrap(),
                &Matrix::from_shape_vec((1, 5), h.clone()).unwrap(),
            );
            for (a, b) in got.iter().zip(oracle(&ps, &g, &x, &h)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn saturated_update_gate_limits() {
        let (mut ps, g) = cell(2, 3, 4);
        let x = Matrix::from_elem((1, 3), 0.3);
        let h = Matrix::from_shape_vec((1, 4), vec![0.5, -0.2, 0.9, -0.7]).unwrap();

        ps.value_mut(g.bx).slice_mut(s![.., 4..8]).fill(60.0);
        let (h_new, c) = g.forward(&ps, &x, &h);
        for (a, b) in h_new.iter().zip(c.n.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        ps.value_mut(g.bx).slice_mut(s![.., 4..8]).fill(-60.0);
        let (h_new, _) = g.forward(&ps, &x, &h);
        for (a, b) in h_new.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut ps, g) = cell(4, 3, 4);
        let x = Matrix::from_shape_simple_fn((2, 3), || rng.gen_range(-1.0..1.0));
        let h = Matrix::from_shape_simple_fn((2, 4), || rng.gen_range(-1.0..1.0));
        let loss = |ps: &ParamStore, x: &Matrix, h: &Matrix| g.forward(ps, x, h).0.mapv(|v| v * v).sum();
        let (y, cache) = g.forward(&ps, &x, &h);
        let (dx, dh) = g.backward(&mut ps, &cache, &(y * 2.0));
        let eps = 1e-6;
        for id in ps.ids().collect::<Vec<_>>() {
            for k in 0..ps.value(id).len() {
                let orig = *ps.scalar_mut(id, k);
                *ps.scalar_mut(id, k) = orig + eps;
                let up = loss(&ps, &x, &h);
                *ps.scalar_mut(id, k) = orig - eps;
                let down = loss(&ps, &x, &h);
                *ps.scalar_mut(id, k) = orig;
                let cols = ps.value(id).ncols();
                let ana = ps.grad(id)[[k / cols, k % cols]];
                assert!(((up - down) / (2.0 * eps) - ana).abs() < 1e-7);
            }
        }
        for (m, d) in [(&x, &dx), (&h, &dh)] {
            for idx in [(0usize, 0usize), (1, 2)] {
                let mut p = m.clone();
                p[idx] += eps;
                let mut q = m.clone();
                q[idx] -= eps;
                let (lp, lq) = if std::ptr::eq(m, &x) {
                    (loss(&ps, &p, &h), loss(&ps, &q, &h))
                } else {
                    (loss(&ps, &x, &p), loss(&ps, &x, &q))
                };
                assert!(((lp - lq) / (2.0 * eps) - d[idx]).abs() < 1e-7);
            }
        }
    }
}
