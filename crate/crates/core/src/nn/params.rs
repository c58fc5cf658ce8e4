use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named weights with same-shaped gradient accumulators and Adam moments.
///
/// Every tensor is stored as a matrix; biases are `1 x n`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    moment1: Vec<Matrix>,
    moment2: Vec<Matrix>,
    adam_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Shape(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.values.len());
        let zeros = Matrix::zeros(value.raw_dim());
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        self.grads.push(zeros.clone());
        self.moment1.push(zeros.clone());
        self.moment2.push(zeros);
        self.values.push(value);
        Ok(id)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = Matrix::from_shape_simple_fn((rows, cols), || {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        });
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in &mut self.grads {
                g.mapv_inplace(|v| v * scale);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// One bias-corrected Adam step over every tensor; gradients are cleared
    /// afterwards.
    pub fn adam_update(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..self.values.len() {
            ndarray::Zip::from(&mut self.values[k])
                .and(&mut self.moment1[k])
                .and(&mut self.moment2[k])
                .and(&self.grads[k])
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
        self.zero_grads();
        if !self.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters became non-finite after Adam step {}",
                self.adam_steps
            )));
        }
        Ok(())
    }

    /// Copy weights (not gradients or moments) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape(format!(
                "parameter names differ ({} vs {} tensors)",
                self.names.len(),
                other.names.len()
            )));
        }
        for (k, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{}: {:?} vs {:?}",
                    self.names[k],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Adam moment buffers, for checkpointing.
    pub fn moments(&self, id: ParamId) -> (&Matrix, &Matrix) {
        (&self.moment1[id.0], &self.moment2[id.0])
    }

    pub fn restore_moments(&mut self, id: ParamId, m: Matrix, v: Matrix, steps: u64) -> Result<()> {
        if m.shape() != self.values[id.0].shape() || v.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!("moment shape mismatch for {}", self.names[id.0])));
        }
        self.moment1[id.0] = m;
        self.moment2[id.0] = v;
        self.adam_steps = steps;
        Ok(())
    }

    /// Flat view of a single scalar, for finite-difference checks.
    pub fn scalar_mut(&mut self, id: ParamId, flat: usize) -> &mut f64 {
        let m = &mut self.values[id.0];
        let cols = m.ncols();
        &mut m[[flat / cols, flat % cols]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Reference Adam written out scalar by scalar.
    fn adam_oracle(w0: f64, grads: &[f64], cfg: &AdamConfig) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powf(t));
            let vh = v / (1.0 - cfg.beta2.powf(t));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        w
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", array![[1.5, -2.0]]).unwrap();
        ps.adam_update(&AdamConfig::default()).unwrap();
        assert_eq!(ps.value(id), &array![[1.5, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", array![[0.0]]).unwrap();
        ps.grad_mut(id)[[0, 0]] = 1.0;
        let cfg = AdamConfig::default();
        ps.adam_update(&cfg).unwrap();
        let dw = ps.value(id)[[0, 0]];
        // |m_hat| = |v_hat|^(1/2) = 1, so the step is lr / (1 + eps)
        assert!((dw + cfg.lr / (1.0 + cfg.eps)).abs() < 1e-15, "{dw}");
        assert!((dw + cfg.lr).abs() < cfg.lr * 1e-7);
        assert_eq!(ps.grad(id)[[0, 0]], 0.0);
    }

    #[test]
    fn three_step_trace_matches_oracle() {
        let cfg = AdamConfig::default();
        let grads = [0.7, -1.3, 0.25];
        let mut ps = ParamStore::new();
        let id = ps.add("w", array![[0.4]]).unwrap();
        for g in grads {
            ps.grad_mut(id)[[0, 0]] = g;
            ps.adam_update(&cfg).unwrap();
        }
        let want = adam_oracle(0.4, &grads, &cfg);
        assert!((ps.value(id)[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", array![[0.0, 0.0]]).unwrap();
        ps.grad_mut(id).assign(&array![[30.0, 40.0]]);
        assert_eq!(ps.clip_grad_norm(10.0), 50.0);
        assert!((ps.grad_norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", array![[0.0]]).unwrap();
        assert!(ps.add("w", array![[0.0]]).is_err());
    }
}
