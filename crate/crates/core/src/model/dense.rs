//! Minimal dense layer with hand-written backward pass.
//!
//! Plain `Vec<f64>` math keeps training bitwise reproducible across runs and
//! makes the gradient easy to check against finite differences.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine layer `y = W x + b`, `W` row-major with `out_dim` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    /// Uniform init in [-1/sqrt(in), 1/sqrt(in)] for weights and biases.
    pub fn new_seeded(out_dim: usize, in_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Dense { out_dim, in_dim, w, b }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense { out_dim, in_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.out_dim * self.in_dim || self.b.len() != self.out_dim {
            return Err(Error::DimMismatch {
                expected: self.out_dim * self.in_dim,
                got: self.w.len(),
                context: "dense layer storage".into(),
            });
        }
        if self.w.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense layer parameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::DimMismatch {
                expected: self.in_dim,
                got: x.len(),
                context: "dense input".into(),
            });
        }
        let mut y = self.b.clone();
        for (r, slot) in y.iter_mut().enumerate() {
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            *slot += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(y)
    }

    /// Accumulates dL/dW and dL/db for this layer given the layer input and
    /// dL/dy, and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut DenseGrad) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(dy.len(), self.out_dim);
        let mut dx = vec![0.0; self.in_dim];
        for (r, &g) in dy.iter().enumerate() {
            grad.db[r] += g;
            let w_row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            let g_row = &mut grad.dw[r * self.in_dim..(r + 1) * self.in_dim];
            for c in 0..self.in_dim {
                g_row[c] += g * x[c];
                dx[c] += w_row[c] * g;
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Forward cost: one multiply-add per weight plus one add per bias.
    pub fn flops(&self) -> u64 {
        2 * (self.out_dim as u64) * (self.in_dim as u64) + self.out_dim as u64
    }
}

/// Gradient buffer shaped like a `Dense`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        DenseGrad { dw: vec![0.0; layer.w.len()], db: vec![0.0; layer.b.len()] }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.dw.iter_mut().chain(self.db.iter_mut()) {
            *v *= s;
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Subgradient of relu, taking 0 at the kink.
pub fn relu_mask(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(upstream)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}
