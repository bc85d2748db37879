use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::uniform_vec;

use super::linalg::sigmoid;
use super::tensor::Tensor;

/// Flat view over a parameter set, used by the finite-difference harness.
pub trait Parameters {
    fn flatten(&self) -> Vec<f64>;
    /// Overwrites parameters from a flat vector produced by [`Parameters::flatten`].
    fn load_flat(&mut self, flat: &[f64]);

    fn param_count(&self) -> usize {
        self.flatten().len()
    }
}

/// Affine map `y = W·x + b` with `W` stored `[out×in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    weight: Tensor,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[0] != bias.len() {
            return Err(Error::argument(format!(
                "weight {:?} incompatible with bias of length {}",
                weight.shape(),
                bias.len()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::numeric("non-finite bias"));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Uniform init in `[-1/√in, 1/√in]` for weights and biases.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::from_parts(vec![out_dim, in_dim], uniform_vec(rng, out_dim * in_dim, bound));
        let bias = uniform_vec(rng, out_dim, bound);
        LinearLayer { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer { weight: Tensor::zeros(&[out_dim, in_dim]), bias: vec![0.0; out_dim] }
    }

    pub fn identity(dim: usize) -> Self {
        LinearLayer { weight: Tensor::identity(dim), bias: vec![0.0; dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn zero_weight(&mut self) {
        self.weight = Tensor::zeros(self.weight.shape());
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::argument(format!(
                "linear layer expects input of length {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok((0..self.out_dim())
            .map(|o| super::tensor::dot(self.weight.row(o), x) + self.bias[o])
            .collect())
    }

    /// Row-wise application: `X·Wᵀ + b` for `X` of shape `[n×in]`.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(Error::argument(format!(
                "linear layer expects rows of length {}, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = x.matmul_t(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &[f64], dy: &[f64]) -> (Vec<f64>, LinearGrads) {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut dx = vec![0.0; inp];
        let mut dw = vec![0.0; out * inp];
        for o in 0..out {
            let w = self.weight.row(o);
            for i in 0..inp {
                dx[i] += dy[o] * w[i];
                dw[o * inp + i] = dy[o] * x[i];
            }
        }
        (dx, LinearGrads { weight: Tensor::from_parts(vec![out, inp], dw), bias: dy.to_vec() })
    }

    pub fn backward_rows(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, LinearGrads)> {
        let dx = dy.matmul(&self.weight)?;
        let dw = dy.t_matmul(x)?;
        let mut db = vec![0.0; self.out_dim()];
        for r in 0..dy.rows() {
            for (acc, v) in db.iter_mut().zip(dy.row(r)) {
                *acc += v;
            }
        }
        Ok((dx, LinearGrads { weight: dw, bias: db }))
    }
}

impl Parameters for LinearLayer {
    fn flatten(&self) -> Vec<f64> {
        let mut v = self.weight.data().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let nw = self.weight.len();
        self.weight.data_mut().copy_from_slice(&flat[..nw]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&flat[nw..nw + nb]);
    }
}

impl LinearGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weight.data().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }
}

/// Smooth GELU-style activation `x·σ(1.702x)`.
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + 1.702 * x * s * (1.0 - s)
}

/// Two-layer perceptron: `W₂·gelu(W₁·x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub hidden: LinearGrads,
    pub output: LinearGrads,
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.hidden.flatten();
        v.extend(self.output.flatten());
        v
    }
}

impl Mlp {
    pub fn new(hidden: LinearLayer, output: LinearLayer) -> Result<Self> {
        if hidden.out_dim() != output.in_dim() {
            return Err(Error::argument("mlp layer dimensions do not chain"));
        }
        Ok(Mlp { hidden, output })
    }

    pub fn seeded(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = LinearLayer::seeded(in_dim, hidden_dim, rng);
        let output = LinearLayer::seeded(hidden_dim, out_dim, rng);
        Mlp { hidden, output }
    }

    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Mlp { hidden: LinearLayer::zeros(in_dim, hidden_dim), output: LinearLayer::zeros(hidden_dim, out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pre = self.hidden.apply(x)?;
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        self.output.apply(&act)
    }

    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let pre = self.hidden.apply_rows(x)?;
        self.output.apply_rows(&pre.map(gelu))
    }

    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        let pre = self.hidden.apply(x)?;
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let (dact, output) = self.output.backward(&act, dy);
        let dpre: Vec<f64> = dact.iter().zip(&pre).map(|(d, &p)| d * gelu_derivative(p)).collect();
        let (dx, hidden) = self.hidden.backward(x, &dpre);
        Ok((dx, MlpGrads { hidden, output }))
    }

    pub fn backward_rows(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, MlpGrads)> {
        let pre = self.hidden.apply_rows(x)?;
        let act = pre.map(gelu);
        let (dact, output) = self.output.backward_rows(&act, dy)?;
        let dpre = Tensor::from_parts(
            dact.shape().to_vec(),
            dact.data().iter().zip(pre.data()).map(|(d, &p)| d * gelu_derivative(p)).collect(),
        );
        let (dx, hidden) = self.hidden.backward_rows(x, &dpre)?;
        Ok((dx, MlpGrads { hidden, output }))
    }
}

impl Parameters for Mlp {
    fn flatten(&self) -> Vec<f64> {
        let mut v = self.hidden.flatten();
        v.extend(self.output.flatten());
        v
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let n = self.hidden.param_count();
        self.hidden.load_flat(&flat[..n]);
        self.output.load_flat(&flat[n..]);
    }
}
