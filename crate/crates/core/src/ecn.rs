//! Entity control: semantic soft masks over the visual feature map,
//! multi-scale convolutional enhancement, dynamic fusion of the subject and
//! object features, and the residual wiring around cross-attention.
//!
//! Feature maps are `[H, W, d]` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, softmax, Conv2d, Mlp, Parameters, Tensor};
use crate::rng::{indexed_substream, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcnConfig {
    pub temp: f64,
    pub kernels: Vec<usize>,
    pub enabled: bool,
}

impl Default for EcnConfig {
    fn default() -> Self {
        EcnConfig { temp: 2.0, kernels: vec![1, 3, 5], enabled: true }
    }
}

impl EcnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temp.is_finite() && self.temp > 0.0) {
            return Err(Error::validation(format!("ecn.temp must be positive, got {}", self.temp)));
        }
        if self.kernels.is_empty() {
            return Err(Error::validation("ecn.kernels must not be empty"));
        }
        if let Some(k) = self.kernels.iter().find(|k| **k == 0 || *k % 2 == 0) {
            return Err(Error::validation(format!("ecn.kernels must be odd and >= 1, got {k}")));
        }
        Ok(())
    }
}

/// Per-position mask values, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }
}

/// Largest f64 strictly below one.
const MASK_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

fn map_dims(v: &Tensor) -> Result<(usize, usize, usize)> {
    match *v.shape() {
        [h, w, d] => Ok((h, w, d)),
        ref s => Err(Error::argument(format!("feature map must be [H,W,d], got {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::argument(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn mask_scores(v: &Tensor, u: &[f64]) -> Result<Vec<f64>> {
    let (h, w, d) = map_dims(v)?;
    if u.len() != d {
        return Err(Error::argument(format!("mask MLP outputs {} values for {d} channels", u.len())));
    }
    let scale = 1.0 / (d as f64).sqrt();
    Ok((0..h * w).map(|p| dot(&v.data()[p * d..(p + 1) * d], u) * scale).collect())
}

/// `m_p = sigmoid(⟨mlp(e), V_p⟩ / √d / temp)`.
pub fn entity_mask(v: &Tensor, e: &[f64], mlp: &Mlp, temp: f64) -> Result<SoftMask> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(Error::argument(format!("temperature must be positive, got {temp}")));
    }
    let (h, w, _) = map_dims(v)?;
    let u = mlp.apply(e)?;
    let values = mask_scores(v, &u)?
        .into_iter()
        .map(|s| sigmoid(s / temp).clamp(f64::MIN_POSITIVE, MASK_MAX))
        .collect();
    Ok(SoftMask { height: h, width: w, values })
}

/// `x_p = m_p · V_p`.
pub fn apply_mask(v: &Tensor, m: &SoftMask) -> Result<Tensor> {
    let (h, w, d) = map_dims(v)?;
    if (m.height, m.width) != (h, w) {
        return Err(Error::argument(format!("mask is {}×{} but features are {h}×{w}", m.height, m.width)));
    }
    let mut out = v.clone();
    for (p, mv) in m.values.iter().enumerate() {
        out.data_mut()[p * d..(p + 1) * d].iter_mut().for_each(|x| *x *= mv);
    }
    Ok(out)
}

/// `x + mean_k conv_k(x)`.
pub fn multiscale_enhance(x: &Tensor, branches: &[Conv2d]) -> Result<Tensor> {
    map_dims(x)?;
    if branches.is_empty() {
        return Err(Error::argument("multi-scale enhancement needs at least one branch"));
    }
    let scale = 1.0 / branches.len() as f64;
    let mut out = x.clone();
    for b in branches {
        out.axpy(scale, &b.forward(x)?)?;
    }
    Ok(out)
}

/// Channel concatenation of two maps with equal spatial dims.
fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "dynamic fusion inputs")?;
    let (h, w, d) = map_dims(a)?;
    let mut data = Vec::with_capacity(2 * a.len());
    for p in 0..h * w {
        data.extend_from_slice(&a.data()[p * d..(p + 1) * d]);
        data.extend_from_slice(&b.data()[p * d..(p + 1) * d]);
    }
    Tensor::new(vec![h, w, 2 * d], data)
}

fn global_average_pool(x: &Tensor) -> Vec<f64> {
    let c = x.cols();
    let n = x.len() / c;
    let mut pooled = vec![0.0; c];
    for p in 0..n {
        pooled.iter_mut().zip(&x.data()[p * c..(p + 1) * c]).for_each(|(a, v)| *a += v);
    }
    pooled.iter_mut().for_each(|a| *a /= n as f64);
    pooled
}

/// Pooled-feature MLP, one `2d→d` convolution per branch and a `1×1`
/// projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub weight_mlp: Mlp,
    pub branches: Vec<Conv2d>,
    pub projection: Conv2d,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fused {
    pub map: Tensor,
    /// Branch weights; they sum to one.
    pub alpha: Vec<f64>,
}

pub fn dynamic_fuse(x_subject: &Tensor, x_object: &Tensor, params: &FusionParams) -> Result<Fused> {
    let c = concat_channels(x_subject, x_object)?;
    let alpha = softmax(&params.weight_mlp.apply(&global_average_pool(&c))?)?;
    if alpha.len() != params.branches.len() {
        return Err(Error::argument(format!(
            "fusion MLP yields {} weights for {} branches",
            alpha.len(),
            params.branches.len()
        )));
    }
    let mut fused: Option<Tensor> = None;
    for (a, b) in alpha.iter().zip(&params.branches) {
        let y = b.forward(&c)?;
        match &mut fused {
            None => fused = Some(y.scale(*a)),
            Some(f) => f.axpy(*a, &y)?,
        }
    }
    let map = params.projection.forward(&fused.expect("at least one branch"))?;
    Ok(Fused { map, alpha })
}

/// `iea_out + cross_attention(iea_out + fused)`.
pub fn ecn_combine(
    iea_out: &Tensor,
    fused: &Tensor,
    cross_attention: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    same_shape(iea_out, fused, "ecn_combine")?;
    let ca_in = iea_out.add(fused)?;
    let ca = cross_attention(&ca_in)?;
    same_shape(iea_out, &ca, "cross-attention output")?;
    iea_out.add(&ca)
}

/// All learnable pieces of the entity control network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcnParams {
    pub mask_mlp: Mlp,
    pub enhance: Vec<Conv2d>,
    pub fusion: FusionParams,
    pub temp: f64,
}

impl EcnParams {
    pub fn seeded(seed: u64, text_dim: usize, dim: usize, cfg: &EcnConfig) -> Result<Self> {
        cfg.validate()?;
        let enhance = cfg
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv2d::seeded(k, dim, dim, &mut indexed_substream(seed, "ecn-enhance", i as u64)))
            .collect::<Result<_>>()?;
        let branches = cfg
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv2d::seeded(k, 2 * dim, dim, &mut indexed_substream(seed, "ecn-fuse", i as u64)))
            .collect::<Result<_>>()?;
        Ok(EcnParams {
            mask_mlp: Mlp::seeded(text_dim, dim, dim, &mut substream(seed, "ecn-mask-mlp")),
            enhance,
            fusion: FusionParams {
                weight_mlp: Mlp::seeded(2 * dim, dim, cfg.kernels.len(), &mut substream(seed, "ecn-fuse-mlp")),
                branches,
                projection: Conv2d::seeded(1, dim, dim, &mut substream(seed, "ecn-projection"))?,
            },
            temp: cfg.temp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityControl {
    pub subject_mask: SoftMask,
    pub object_mask: SoftMask,
    pub fused: Fused,
}

/// Mask, enhance and fuse one subject/object pair over the feature map `v`.
pub fn entity_control(v: &Tensor, e_subject: &[f64], e_object: &[f64], params: &EcnParams) -> Result<EntityControl> {
    let subject_mask = entity_mask(v, e_subject, &params.mask_mlp, params.temp)?;
    let object_mask = entity_mask(v, e_object, &params.mask_mlp, params.temp)?;
    let xs = multiscale_enhance(&apply_mask(v, &subject_mask)?, &params.enhance)?;
    let xo = multiscale_enhance(&apply_mask(v, &object_mask)?, &params.enhance)?;
    let fused = dynamic_fuse(&xs, &xo, &params.fusion)?;
    Ok(EntityControl { subject_mask, object_mask, fused })
}

#[derive(Debug, Clone)]
pub struct EntityControlGrads {
    pub d_v: Tensor,
    pub d_subject: Vec<f64>,
    pub d_object: Vec<f64>,
}

fn entity_mask_backward(
    v: &Tensor,
    e: &[f64],
    mlp: &Mlp,
    temp: f64,
    mask: &SoftMask,
    d_mask: &[f64],
    d_v: &mut Tensor,
) -> Result<Vec<f64>> {
    let (_, _, d) = map_dims(v)?;
    let u = mlp.apply(e)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_u = vec![0.0; d];
    for (p, (&m, &dm)) in mask.values.iter().zip(d_mask).enumerate() {
        let ds = dm * m * (1.0 - m) / temp * scale;
        let vp = &v.data()[p * d..(p + 1) * d];
        d_u.iter_mut().zip(vp).for_each(|(g, x)| *g += ds * x);
        d_v.data_mut()[p * d..(p + 1) * d].iter_mut().zip(&u).for_each(|(g, x)| *g += ds * x);
    }
    Ok(mlp.backward(e, &d_u)?.0)
}

fn apply_mask_backward(v: &Tensor, mask: &SoftMask, d_x: &Tensor, d_v: &mut Tensor) -> Vec<f64> {
    let d = v.cols();
    mask.values
        .iter()
        .enumerate()
        .map(|(p, &m)| {
            let g = &d_x.data()[p * d..(p + 1) * d];
            d_v.data_mut()[p * d..(p + 1) * d].iter_mut().zip(g).for_each(|(a, g)| *a += m * g);
            dot(g, &v.data()[p * d..(p + 1) * d])
        })
        .collect()
}

fn multiscale_backward(x: &Tensor, branches: &[Conv2d], d_out: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / branches.len() as f64;
    let mut d_x = d_out.clone();
    for b in branches {
        d_x.axpy(scale, &b.backward(x, d_out)?.0)?;
    }
    Ok(d_x)
}

/// Returns the gradients for `(x_subject, x_object)`.
fn dynamic_fuse_backward(xs: &Tensor, xo: &Tensor, params: &FusionParams, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = concat_channels(xs, xo)?;
    let pooled = global_average_pool(&c);
    let alpha = softmax(&params.weight_mlp.apply(&pooled)?)?;
    let ys: Vec<Tensor> = params.branches.iter().map(|b| b.forward(&c)).collect::<Result<_>>()?;
    let mut f = ys[0].scale(alpha[0]);
    for (a, y) in alpha.iter().zip(&ys).skip(1) {
        f.axpy(*a, y)?;
    }
    let (d_f, _) = params.projection.backward(&f, d_out)?;
    let d_alpha: Vec<f64> = ys.iter().map(|y| dot(d_f.data(), y.data())).collect();
    let mut d_c = Tensor::zeros(c.shape());
    for (a, b) in alpha.iter().zip(&params.branches) {
        d_c.add_assign(&b.backward(&c, &d_f.scale(*a))?.0)?;
    }
    let d_z = crate::numerics::linalg::softmax_backward(&alpha, &d_alpha);
    let (d_pooled, _) = params.weight_mlp.backward(&pooled, &d_z)?;
    let ch = c.cols();
    let n = c.len() / ch;
    for p in 0..n {
        d_c.data_mut()[p * ch..(p + 1) * ch]
            .iter_mut()
            .zip(&d_pooled)
            .for_each(|(g, dp)| *g += dp / n as f64);
    }
    let (h, w, d) = map_dims(xs)?;
    let mut d_s = Vec::with_capacity(xs.len());
    let mut d_o = Vec::with_capacity(xo.len());
    for p in 0..h * w {
        let row = &d_c.data()[p * 2 * d..(p + 1) * 2 * d];
        d_s.extend_from_slice(&row[..d]);
        d_o.extend_from_slice(&row[d..]);
    }
    Ok((Tensor::new(vec![h, w, d], d_s)?, Tensor::new(vec![h, w, d], d_o)?))
}

/// Gradient of `⟨d_fused, entity_control(v, e_s, e_o).fused.map⟩` with
/// respect to the feature map and both entity embeddings.
pub fn entity_control_backward(
    v: &Tensor,
    e_subject: &[f64],
    e_object: &[f64],
    params: &EcnParams,
    d_fused: &Tensor,
) -> Result<EntityControlGrads> {
    let ms = entity_mask(v, e_subject, &params.mask_mlp, params.temp)?;
    let mo = entity_mask(v, e_object, &params.mask_mlp, params.temp)?;
    let xs_masked = apply_mask(v, &ms)?;
    let xo_masked = apply_mask(v, &mo)?;
    let xs = multiscale_enhance(&xs_masked, &params.enhance)?;
    let xo = multiscale_enhance(&xo_masked, &params.enhance)?;
    let (d_xs, d_xo) = dynamic_fuse_backward(&xs, &xo, &params.fusion, d_fused)?;
    let d_xs_masked = multiscale_backward(&xs_masked, &params.enhance, &d_xs)?;
    let d_xo_masked = multiscale_backward(&xo_masked, &params.enhance, &d_xo)?;
    let mut d_v = Tensor::zeros(v.shape());
    let d_ms = apply_mask_backward(v, &ms, &d_xs_masked, &mut d_v);
    let d_mo = apply_mask_backward(v, &mo, &d_xo_masked, &mut d_v);
    let d_subject = entity_mask_backward(v, e_subject, &params.mask_mlp, params.temp, &ms, &d_ms, &mut d_v)?;
    let d_object = entity_mask_backward(v, e_object, &params.mask_mlp, params.temp, &mo, &d_mo, &mut d_v)?;
    Ok(EntityControlGrads { d_v, d_subject, d_object })
}

impl Parameters for EcnParams {
    fn flatten(&self) -> Vec<f64> {
        let mut v = self.mask_mlp.flatten();
        self.enhance.iter().for_each(|c| v.extend(c.flatten()));
        v.extend(self.fusion.weight_mlp.flatten());
        self.fusion.branches.iter().for_each(|c| v.extend(c.flatten()));
        v.extend(self.fusion.projection.flatten());
        v
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut take = |p: &mut dyn Parameters| {
            let n = p.param_count();
            p.load_flat(&flat[off..off + n]);
            off += n;
        };
        take(&mut self.mask_mlp);
        self.enhance.iter_mut().for_each(|c| take(c));
        take(&mut self.fusion.weight_mlp);
        self.fusion.branches.iter_mut().for_each(|c| take(c));
        take(&mut self.fusion.projection);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, LinearLayer, Objective};
    use crate::rng::gaussian_vec;
    use proptest::prelude::*;

    fn random_map(h: usize, w: usize, d: usize, seed: u64, scale: f64) -> Tensor {
        let data = gaussian_vec(&mut substream(seed, "ecn-map"), h * w * d).into_iter().map(|x| x * scale).collect();
        Tensor::new(vec![h, w, d], data).unwrap()
    }

    fn small_params(seed: u64, text_dim: usize, d: usize) -> EcnParams {
        EcnParams::seeded(seed, text_dim, d, &EcnConfig::default()).unwrap()
    }

    #[test]
    fn zero_features_give_half_mask() {
        let p = small_params(1, 5, 4);
        let v = Tensor::zeros(&[3, 3, 4]);
        let m = entity_mask(&v, &[0.3; 5], &p.mask_mlp, 2.0).unwrap();
        assert!(m.values.iter().all(|&x| x == 0.5));
        let x = apply_mask(&random_map(3, 3, 4, 2, 1.0), &m).unwrap();
        assert_eq!(x, random_map(3, 3, 4, 2, 1.0).scale(0.5));
    }

    #[test]
    fn huge_temperature_flattens_mask() {
        let p = small_params(2, 5, 4);
        let v = random_map(4, 4, 4, 3, 3.0);
        let m = entity_mask(&v, &[1.0, -1.0, 0.5, 0.2, 0.0], &p.mask_mlp, 1e6).unwrap();
        assert!(m.values.iter().all(|x| (x - 0.5).abs() <= 1e-4));
    }

    #[test]
    fn mask_is_monotone_in_score() {
        let p = small_params(3, 5, 4);
        let v = random_map(5, 5, 4, 4, 1.0);
        let e = [0.2, -0.4, 1.0, 0.1, 0.3];
        let m = entity_mask(&v, &e, &p.mask_mlp, 2.0).unwrap();
        let s = mask_scores(&v, &p.mask_mlp.apply(&e).unwrap()).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    assert!(m.values[i] > m.values[j]);
                }
            }
        }
    }

    #[test]
    fn mask_variance_shrinks_with_temperature() {
        let p = small_params(5, 5, 8);
        let v = random_map(6, 6, 8, 6, 2.0);
        let e = [0.5, -1.0, 0.8, 0.3, -0.2];
        let vars: Vec<f64> = [0.5, 1.0, 2.0, 8.0, 1e6]
            .iter()
            .map(|&t| entity_mask(&v, &e, &p.mask_mlp, t).unwrap().variance())
            .collect();
        for w in vars.windows(2) {
            assert!(w[1] <= w[0], "{vars:?}");
        }
    }

    #[test]
    fn planted_patch_dominates_masked_norm() {
        let d = 6;
        let p = small_params(7, 5, d);
        let e = [0.9, 0.1, -0.3, 0.4, 0.7];
        let u = p.mask_mlp.apply(&e).unwrap();
        let mut v = random_map(6, 6, d, 8, 0.2);
        let unit: Vec<f64> = u.iter().map(|x| x / crate::numerics::l2_norm(&u)).collect();
        let patch = [(1, 1), (1, 2), (2, 1), (2, 2)];
        for &(y, x) in &patch {
            let p0 = (y * 6 + x) * d;
            v.data_mut()[p0..p0 + d].iter_mut().zip(&unit).for_each(|(a, b)| *a = 3.0 * b);
        }
        let m = entity_mask(&v, &e, &p.mask_mlp, 2.0).unwrap();
        let x = apply_mask(&v, &m).unwrap();
        let norm = |p: usize| crate::numerics::l2_norm(&x.data()[p * d..(p + 1) * d]);
        let inside: Vec<usize> = patch.iter().map(|(y, x)| y * 6 + x).collect();
        let fg = inside.iter().map(|&p| norm(p)).sum::<f64>() / inside.len() as f64;
        let bg_idx: Vec<usize> = (0..36).filter(|p| !inside.contains(p)).collect();
        let bg = bg_idx.iter().map(|&p| norm(p)).sum::<f64>() / bg_idx.len() as f64;
        assert!(fg >= bg);
    }

    #[test]
    fn apply_mask_shape_mismatch() {
        let m = SoftMask { height: 2, width: 2, values: vec![0.5; 4] };
        assert!(matches!(apply_mask(&Tensor::zeros(&[3, 2, 1]), &m), Err(Error::Argument(_))));
    }

    #[test]
    fn multiscale_identity_cases() {
        let x = random_map(4, 5, 3, 9, 1.0);
        let mut branches: Vec<Conv2d> = [1, 3, 5].iter().map(|&k| Conv2d::zeros(k, 3, 3).unwrap()).collect();
        assert_eq!(multiscale_enhance(&x, &branches).unwrap(), x);
        branches[0] = Conv2d::identity_1x1(3);
        let out = multiscale_enhance(&x, &branches).unwrap();
        let expected = x.add(&x.scale(1.0 / 3.0)).unwrap();
        assert!(out.max_abs_diff(&expected) <= 1e-15);
    }

    /// Straight-line dynamic fusion with explicit loops.
    fn naive_fuse(xs: &Tensor, xo: &Tensor, p: &FusionParams) -> (Vec<f64>, Vec<f64>) {
        let (h, w, d) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let cat = |y: usize, x: usize, ch: usize| {
            if ch < d {
                xs.data()[(y * w + x) * d + ch]
            } else {
                xo.data()[(y * w + x) * d + ch - d]
            }
        };
        let mut pooled = vec![0.0; 2 * d];
        for y in 0..h {
            for x in 0..w {
                for (ch, acc) in pooled.iter_mut().enumerate() {
                    *acc += cat(y, x, ch) / (h * w) as f64;
                }
            }
        }
        let z = p.weight_mlp.apply(&pooled).unwrap();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let alpha: Vec<f64> = ex.iter().map(|v| v / ex.iter().sum::<f64>()).collect();
        let mut fused = vec![0.0; h * w * d];
        for (a, conv) in alpha.iter().zip(&p.branches) {
            let flat = conv.flatten();
            let k = conv.kernel();
            let pad = (k / 2) as isize;
            let (wts, bias) = flat.split_at(d * k * k * 2 * d);
            for y in 0..h {
                for x in 0..w {
                    for o in 0..d {
                        let mut acc = bias[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                for i in 0..2 * d {
                                    acc += wts[((o * k + ky) * k + kx) * 2 * d + i] * cat(sy as usize, sx as usize, i);
                                }
                            }
                        }
                        fused[(y * w + x) * d + o] += a * acc;
                    }
                }
            }
        }
        let proj = p.projection.flatten();
        let (pw, pb) = proj.split_at(d * d);
        let mut out = vec![0.0; h * w * d];
        for px in 0..h * w {
            for o in 0..d {
                out[px * d + o] = pb[o] + (0..d).map(|i| pw[o * d + i] * fused[px * d + i]).sum::<f64>();
            }
        }
        (out, alpha)
    }

    #[test]
    fn dynamic_fuse_matches_naive_oracle_under_input_scaling() {
        let d = 3;
        let mut p = small_params(11, 4, d);
        let hidden = p.fusion.weight_mlp.hidden.clone();
        p.fusion.weight_mlp.hidden =
            LinearLayer::new(hidden.weight().clone(), vec![0.0; hidden.out_dim()]).unwrap();
        let xs = random_map(4, 4, d, 12, 1.0);
        let xo = random_map(4, 4, d, 13, 1.0);
        for s in [1.0, 2.0] {
            let (a, b) = (xs.scale(s), xo.scale(s));
            let got = dynamic_fuse(&a, &b, &p.fusion).unwrap();
            let (want, alpha) = naive_fuse(&a, &b, &p.fusion);
            assert!(got.map.data().iter().zip(&want).all(|(x, y)| (x - y).abs() <= 1e-12));
            assert!(got.alpha.iter().zip(&alpha).all(|(x, y)| (x - y).abs() <= 1e-14));
        }
    }

    #[test]
    fn identical_inputs_fuse_reproducibly() {
        let p = small_params(14, 4, 3);
        let x = random_map(3, 3, 3, 15, 1.0);
        let a = dynamic_fuse(&x, &x, &p.fusion).unwrap();
        let b = dynamic_fuse(&x, &x, &p.fusion).unwrap();
        assert_eq!(a, b);
        assert!(matches!(dynamic_fuse(&x, &Tensor::zeros(&[2, 3, 3]), &p.fusion), Err(Error::Argument(_))));
    }

    #[test]
    fn combine_examples() {
        let iea = random_map(3, 3, 2, 16, 1.0);
        let fused = random_map(3, 3, 2, 17, 1.0);
        let zero = |x: &Tensor| Ok(Tensor::zeros(x.shape()));
        assert_eq!(ecn_combine(&iea, &fused, zero).unwrap(), iea);
        let ident = |x: &Tensor| Ok(x.clone());
        let out = ecn_combine(&iea, &Tensor::zeros(&[3, 3, 2]), ident).unwrap();
        assert_eq!(out, iea.scale(2.0));
        let square = |x: &Tensor| Ok(x.map(|v| v * v));
        let out = ecn_combine(&iea, &fused, square).unwrap();
        let ca = iea.add(&fused).unwrap().map(|v| v * v);
        assert_eq!(out.sub(&iea).unwrap().data().len(), ca.len());
        assert!(out.sub(&iea).unwrap().max_abs_diff(&ca) <= 1e-15);
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        let (h, w, d, td) = (4, 4, 4, 5);
        let p = small_params(21, td, d);
        let v = random_map(h, w, d, 22, 1.0);
        let es = gaussian_vec(&mut substream(23, "es"), td);
        let eo = gaussian_vec(&mut substream(24, "eo"), td);
        let readout = random_map(h, w, d, 25, 1.0);
        let n = v.len();
        let split = |x: &[f64]| (Tensor::new(vec![h, w, d], x[..n].to_vec()).unwrap(), x[n..n + td].to_vec(), x[n + td..].to_vec());
        let f = Objective::new(
            |x: &[f64]| {
                let (v, es, eo) = split(x);
                Ok(dot(entity_control(&v, &es, &eo, &p)?.fused.map.data(), readout.data()))
            },
            |x: &[f64]| {
                let (v, es, eo) = split(x);
                let g = entity_control_backward(&v, &es, &eo, &p, &readout)?;
                Ok([g.d_v.data(), &g.d_subject, &g.d_object].concat())
            },
        );
        let x0 = [v.data(), &es, &eo].concat();
        assert!(grad_check(&f, &x0, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(EcnConfig::default().validate().is_ok());
        assert!(EcnConfig { temp: 0.0, ..EcnConfig::default() }.validate().is_err());
        assert!(EcnConfig { kernels: vec![2], ..EcnConfig::default() }.validate().is_err());
        assert!(EcnConfig { kernels: vec![], ..EcnConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn masks_stay_open_and_shapes_preserved(
            seed in 0u64..300,
            scale in 0.0f64..1e3,
            temp in 1e-3f64..1e3,
        ) {
            let p = small_params(seed, 3, 3);
            let v = random_map(3, 4, 3, seed, scale);
            let m = entity_mask(&v, &[1.0, 2.0, -3.0], &p.mask_mlp, temp).unwrap();
            prop_assert!(m.values.iter().all(|&x| x > 0.0 && x < 1.0));
            let x = multiscale_enhance(&apply_mask(&v, &m).unwrap(), &p.enhance).unwrap();
            prop_assert_eq!(x.shape(), v.shape());
            let f = dynamic_fuse(&x, &x, &p.fusion).unwrap();
            prop_assert_eq!(f.map.shape(), v.shape());
            prop_assert!((f.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
