use ndarray::{Axis, Zip};
use rand::Rng;

use super::params::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Affine map `Y = X W + b` over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Shape(format!("{name}: zero-sized layer {fan_in}x{fan_out}")));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.add_uniform(&format!("{name}.w"), fan_in, fan_out, bound, rng)?;
        let b = ps.add_uniform(&format!("{name}.b"), 1, fan_out, bound, rng)?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Matrix) -> Matrix {
        assert_eq!(x.ncols(), self.fan_in, "dense input width");
        let mut y = x.dot(ps.value(self.w));
        y += ps.value(self.b);
        y
    }

    /// Accumulate weight gradients and return the input gradient.
    pub fn backward(&self, ps: &mut ParamStore, x: &Matrix, dy: &Matrix) -> Matrix {
        self.accumulate(ps, x, dy);
        dy.dot(&ps.value(self.w).t())
    }

    /// Accumulate weight gradients only; for layers whose input is data.
    pub fn accumulate(&self, ps: &mut ParamStore, x: &Matrix, dy: &Matrix) {
        let dw = x.t().dot(dy);
        *ps.grad_mut(self.w) += &dw;
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        *ps.grad_mut(self.b) += &db;
    }
}

/// Rectified hidden layers with a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs and pre-activations of each layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape(format!("{name}: an MLP needs at least input and output sizes")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Dense::new(ps, &format!("{name}.{k}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward(&self, ps: &ParamStore, x: &Matrix) -> (Matrix, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(ps, &h);
            cache.inputs.push(h);
            h = if k < last { z.mapv(relu) } else { z.clone() };
            cache.pre.push(z);
        }
        (h, cache)
    }

    pub fn forward_only(&self, ps: &ParamStore, x: &Matrix) -> Matrix {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ps, &h);
            if k < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    /// Backpropagate `dy`; returns the input gradient when `need_dx`.
    pub fn backward(&self, ps: &mut ParamStore, cache: &MlpCache, dy: &Matrix, need_dx: bool) -> Option<Matrix> {
        let mut grad = dy.clone();
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                Zip::from(&mut grad).and(&cache.pre[k]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            if k == 0 && !need_dx {
                self.layers[0].accumulate(ps, &cache.inputs[0], &grad);
                return None;
            }
            grad = self.layers[k].backward(ps, &cache.inputs[k], &grad);
        }
        Some(grad)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}
