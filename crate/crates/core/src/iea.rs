//! Interaction-enhanced attention: gated, δ-scaled self-attention that lets
//! interaction tokens steer the visual tokens during the early part of sampling.

use serde::{Deserialize, Serialize};

use crate::action_offset::OffsetGroup;
use crate::embedding::InteractionTokens;
use crate::error::{Error, Result};
use crate::implicit_mining::ImplicitTokens;
use crate::numerics::{self_attention, self_attention_backward, AttentionGrads, AttentionParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IeaConfig {
    pub delta: f64,
    pub w: f64,
    pub s1: f64,
    pub s2: f64,
    pub gamma: f64,
}

impl Default for IeaConfig {
    fn default() -> Self {
        IeaConfig { delta: 1.3, w: 0.7, s1: 1.0, s2: 0.7, gamma: 1.0 }
    }
}

impl IeaConfig {
    pub fn validate(&self) -> Result<()> {
        let IeaConfig { delta, w, s1, s2, gamma } = *self;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::validation(format!("iea.delta must be positive, got {delta}")));
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::validation(format!("iea.w must lie in [0, 1], got {w}")));
        }
        if !(0.0 <= s2 && s2 <= s1 && s1 <= 1.0) {
            return Err(Error::validation(format!("need 0 <= s2 <= s1 <= 1, got s1={s1}, s2={s2}")));
        }
        if !gamma.is_finite() {
            return Err(Error::validation("iea.gamma must be finite"));
        }
        Ok(())
    }

    /// Multiplier applied to the attention slice: `w·tanh(γ)`.
    pub fn gate(&self) -> f64 {
        self.w * self.gamma.tanh()
    }
}

/// `softmax(QKᵀ/√d)·V·δ` over the whole token sequence.
pub fn stren_att(tokens: &Tensor, params: &AttentionParams, delta: f64) -> Result<Tensor> {
    let (out, _) = self_attention(tokens, params)?;
    Ok(out.scale(delta))
}

/// Stacks `v` (rows) and `info` into one sequence.
fn concat(v: &Tensor, info: &[&[f64]]) -> Result<Tensor> {
    if info.is_empty() {
        return Ok(v.clone());
    }
    let info = Tensor::stack_rows(info.iter().copied())?;
    Tensor::vcat(&[v, &info])
}

/// `v + strength·w·tanh(γ)·stren_att([v‖info])[..len(v)]`.
pub fn gated_inject_scaled(
    v: &Tensor,
    info: &[&[f64]],
    params: &AttentionParams,
    cfg: &IeaConfig,
    strength: f64,
) -> Result<Tensor> {
    if v.shape().len() != 2 {
        return Err(Error::argument(format!("visual tokens must be a matrix, got shape {:?}", v.shape())));
    }
    let coef = strength * cfg.gate();
    if coef == 0.0 {
        return Ok(v.clone());
    }
    let x = concat(v, info)?;
    let att = stren_att(&x, params, cfg.delta)?;
    let mut out = v.clone();
    out.axpy(coef, &att.top_rows(v.rows()))?;
    Ok(out)
}

pub fn gated_inject(v: &Tensor, info: &[&[f64]], params: &AttentionParams, cfg: &IeaConfig) -> Result<Tensor> {
    gated_inject_scaled(v, info, params, cfg, 1.0)
}

#[derive(Debug, Clone)]
pub struct GatedInjectGrads {
    pub d_v: Tensor,
    /// Gradient for the info rows, `None` when there were none.
    pub d_info: Option<Tensor>,
    pub params: AttentionGrads,
}

/// Backward pass of [`gated_inject_scaled`] for upstream gradient `d_out`.
pub fn gated_inject_backward(
    v: &Tensor,
    info: &[&[f64]],
    params: &AttentionParams,
    cfg: &IeaConfig,
    strength: f64,
    d_out: &Tensor,
) -> Result<GatedInjectGrads> {
    if d_out.shape() != v.shape() {
        return Err(Error::argument("upstream gradient must match the visual tokens"));
    }
    let x = concat(v, info)?;
    let (_, cache) = self_attention(&x, params)?;
    let coef = strength * cfg.gate() * cfg.delta;
    let mut d_att = Tensor::zeros(x.shape());
    let n = v.rows();
    for (i, g) in d_att.data_mut()[..n * v.cols()].iter_mut().zip(d_out.data()) {
        *i = coef * g;
    }
    let grads = self_attention_backward(&x, params, &cache, &d_att)?;
    let d = v.cols();
    let mut d_v = d_out.clone();
    d_v.add_assign(&grads.d_x.top_rows(n))?;
    let d_info = (!info.is_empty())
        .then(|| Tensor::new(vec![info.len(), d], grads.d_x.data()[n * d..].to_vec()))
        .transpose()?;
    Ok(GatedInjectGrads { d_v, d_info, params: grads })
}

/// Effective strength at sampling step `t` of `total`: `s1` while
/// `t/total < s2`, zero afterwards.
pub fn schedule_active(t: usize, total: usize, cfg: &IeaConfig) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    if (t as f64) / (total as f64) < cfg.s2 {
        cfg.s1
    } else {
        0.0
    }
}

/// Info sequence in family order: explicit triples, implicit triples, then
/// every triple of every offset group.
pub fn collect_info_tokens<'a>(
    explicit: &'a [InteractionTokens],
    implicit: &'a [ImplicitTokens],
    offsets: &'a [OffsetGroup],
) -> Vec<&'a [f64]> {
    let mut info: Vec<&[f64]> = Vec::new();
    info.extend(explicit.iter().flat_map(|t| t.triple()));
    info.extend(implicit.iter().flat_map(|t| t.triple()));
    info.extend(offsets.iter().flat_map(|g| g.tokens()));
    info
}

/// One IEA layer application at sampling step `t` of `total`.
#[allow(clippy::too_many_arguments)]
pub fn iea_forward(
    v: &Tensor,
    explicit: &[InteractionTokens],
    implicit: &[ImplicitTokens],
    offsets: &[OffsetGroup],
    params: &AttentionParams,
    cfg: &IeaConfig,
    t: usize,
    total: usize,
) -> Result<Tensor> {
    let info = collect_info_tokens(explicit, implicit, offsets);
    let strength = schedule_active(t, total, cfg);
    if info.is_empty() || strength == 0.0 {
        return Ok(v.clone());
    }
    gated_inject_scaled(v, &info, params, cfg, strength)
}
