//! Single-head scaled dot-product attention with a hand-written backward pass.
//!
//! Tokens are rows. Projections follow `q_i = W_Q·x_i`, i.e. `Q = X·W_Qᵀ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::uniform_vec;

use super::layers::Parameters;
use super::linalg::{softmax_backward, softmax_in_place};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic attention weights `[n_query × n_key]`.
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_x: Tensor,
    pub d_wq: Tensor,
    pub d_wk: Tensor,
    pub d_wv: Tensor,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let p = AttentionParams { w_q, w_k, w_v };
        let d = p.w_q.shape().first().copied().unwrap_or(0);
        for w in [&p.w_q, &p.w_k, &p.w_v] {
            if w.shape() != [d, d] {
                return Err(Error::argument(format!("attention projection must be [{d}×{d}], got {:?}", w.shape())));
            }
        }
        Ok(p)
    }

    pub fn seeded(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut make = || Tensor::from_parts(vec![dim, dim], uniform_vec(rng, dim * dim, bound));
        AttentionParams { w_q: make(), w_k: make(), w_v: make() }
    }

    pub fn identity(dim: usize) -> Self {
        AttentionParams { w_q: Tensor::identity(dim), w_k: Tensor::identity(dim), w_v: Tensor::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl Parameters for AttentionParams {
    fn flatten(&self) -> Vec<f64> {
        [self.w_q.data(), self.w_k.data(), self.w_v.data()].concat()
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let n = self.w_q.len();
        self.w_q.data_mut().copy_from_slice(&flat[..n]);
        self.w_k.data_mut().copy_from_slice(&flat[n..2 * n]);
        self.w_v.data_mut().copy_from_slice(&flat[2 * n..3 * n]);
    }
}

impl AttentionGrads {
    /// Parameter gradients in [`Parameters::flatten`] order.
    pub fn flatten_params(&self) -> Vec<f64> {
        [self.d_wq.data(), self.d_wk.data(), self.d_wv.data()].concat()
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with queries from `queries` and keys/values from `context`.
pub fn attend(queries: &Tensor, context: &Tensor, params: &AttentionParams) -> Result<(Tensor, AttentionCache)> {
    let d = params.dim();
    if queries.rows() == 0 || context.rows() == 0 {
        return Err(Error::argument("attention over an empty sequence"));
    }
    if queries.cols() != d || context.cols() != d {
        return Err(Error::argument(format!(
            "attention dim {d} but tokens have dims {} and {}",
            queries.cols(),
            context.cols()
        )));
    }
    let q = queries.matmul_t(&params.w_q)?;
    let k = context.matmul_t(&params.w_k)?;
    let v = context.matmul_t(&params.w_v)?;
    let mut weights = q.matmul_t(&k)?.scale(1.0 / (d as f64).sqrt());
    for r in 0..weights.rows() {
        softmax_in_place(weights.row_mut(r));
    }
    let out = weights.matmul(&v)?;
    Ok((out, AttentionCache { q, k, v, weights }))
}

pub fn self_attention(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, AttentionCache)> {
    attend(x, x, params)
}

/// Backward pass of [`self_attention`] for upstream gradient `d_out`.
pub fn self_attention_backward(
    x: &Tensor,
    params: &AttentionParams,
    cache: &AttentionCache,
    d_out: &Tensor,
) -> Result<AttentionGrads> {
    let d = params.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let a = &cache.weights;

    let d_v = a.t_matmul(d_out)?;
    let d_a = d_out.matmul_t(&cache.v)?;
    let mut d_s = Tensor::zeros(a.shape());
    for r in 0..a.rows() {
        let row = softmax_backward(a.row(r), d_a.row(r));
        for (dst, v) in d_s.row_mut(r).iter_mut().zip(row) {
            *dst = v * inv_sqrt_d;
        }
    }
    let d_q = d_s.matmul(&cache.k)?;
    let d_k = d_s.t_matmul(&cache.q)?;

    let d_wq = d_q.t_matmul(x)?;
    let d_wk = d_k.t_matmul(x)?;
    let d_wv = d_v.t_matmul(x)?;
    let mut d_x = d_q.matmul(&params.w_q)?;
    d_x.add_assign(&d_k.matmul(&params.w_k)?)?;
    d_x.add_assign(&d_v.matmul(&params.w_v)?)?;
    Ok(AttentionGrads { d_x, d_wq, d_wk, d_wv })
}
