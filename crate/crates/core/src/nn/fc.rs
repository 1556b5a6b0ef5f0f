use rand::Rng;

use super::ops::{matmul_ab_acc, matmul_abt, matmul_atb_acc};
use super::{Activation, Tensor};
use crate::error::{Error, Result};

/// `y = act(W x + b)` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

/// Inputs and outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct FcCache {
    batch: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl FcLayer {
    /// Weights and bias drawn from `uniform(-s, s)`, `s = 1/sqrt(in_dim)`.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = Tensor::uniform(&[out_dim, in_dim], s, rng);
        let bias = with_bias.then(|| Tensor::uniform(&[out_dim], s, rng));
        Self { weight, bias, activation }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Shape(format!("FC weight must be 2-D, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.rows()] {
                return Err(Error::Shape(format!(
                    "FC bias shape {:?} does not match {} outputs",
                    b.shape(),
                    weight.rows()
                )));
            }
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Same architecture, all parameters zero (a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.as_ref().map(Tensor::zeros_like),
            activation: self.activation,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    /// Single-vector forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.0)
    }

    /// Forward pass over `batch` rows of `x` (row-major `batch x in_dim`).
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, FcCache)> {
        let (din, dout) = (self.in_dim(), self.out_dim());
        if x.len() != batch * din {
            return Err(Error::Shape(format!(
                "FC layer expects {batch}x{din} input, got {} values",
                x.len()
            )));
        }
        let mut y = vec![0.0; batch * dout];
        matmul_abt(x, batch, din, self.weight.data(), dout, &mut y);
        let bias = self.bias.as_ref().map(Tensor::data);
        for row in y.chunks_mut(dout) {
            if let Some(b) = bias {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
            for v in row.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
        let cache = FcCache { batch, x: x.to_vec(), y: y.clone() };
        Ok((y, cache))
    }

    /// Accumulate parameter gradients into `grads` and return `dL/dx`.
    pub fn backward(&self, cache: &FcCache, dy: &[f64], grads: &mut FcLayer) -> Vec<f64> {
        let (din, dout, batch) = (self.in_dim(), self.out_dim(), cache.batch);
        debug_assert_eq!(dy.len(), batch * dout);
        let dpre: Vec<f64> = dy
            .iter()
            .zip(&cache.y)
            .map(|(g, y)| g * self.activation.derivative_from_output(*y))
            .collect();
        matmul_atb_acc(&dpre, batch, dout, &cache.x, din, grads.weight.data_mut());
        if let Some(gb) = grads.bias.as_mut() {
            let gb = gb.data_mut();
            for row in dpre.chunks(dout) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![0.0; batch * din];
        matmul_ab_acc(&dpre, batch, dout, self.weight.data(), din, &mut dx);
        dx
    }
}
