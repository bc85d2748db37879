//! Finite-difference verification of every hand-written backward pass used by
//! the conditioning stack.

use serde::Serialize;

use crate::ecn::{entity_control, entity_control_backward, EcnConfig, EcnParams};
use crate::error::Result;
use crate::iea::{gated_inject, gated_inject_backward, IeaConfig};
use crate::implicit_mining::TripletEncoder;
use crate::numerics::{dot, grad_check, AttentionParams, Mlp, Objective, Parameters, Tensor};
use crate::rng::{gaussian_vec, substream};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

const DIM: usize = 16;
const TEXT_DIM: usize = 12;
const MAP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub inputs: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn tensor(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(&mut substream(seed, name), n)).expect("finite samples")
}

fn record(name: &'static str, inputs: usize, err: f64) -> GradCheckResult {
    GradCheckResult { name, inputs, max_rel_error: err, passed: err <= GRAD_TOL }
}

fn iea_checks(seed: u64, out: &mut Vec<GradCheckResult>) -> Result<()> {
    let v = tensor(&[5, DIM], seed, "gc-iea-v");
    let info_t = tensor(&[6, DIM], seed, "gc-iea-info");
    let info: Vec<&[f64]> = (0..6).map(|i| info_t.row(i)).collect();
    let base = AttentionParams::seeded(DIM, &mut substream(seed, "gc-iea-params"));
    let readout = tensor(&[5, DIM], seed, "gc-iea-readout");
    let cfg = IeaConfig::default();
    let n = DIM * DIM;

    for (slot, name) in [(0, "iea.w_q"), (1, "iea.w_k"), (2, "iea.w_v")] {
        let full = base.flatten();
        let with = |sub: &[f64]| {
            let mut flat = full.clone();
            flat[slot * n..(slot + 1) * n].copy_from_slice(sub);
            let mut p = base.clone();
            p.load_flat(&flat);
            p
        };
        let f = Objective::new(
            |x: &[f64]| Ok(dot(gated_inject(&v, &info, &with(x), &cfg)?.data(), readout.data())),
            |x: &[f64]| {
                let g = gated_inject_backward(&v, &info, &with(x), &cfg, 1.0, &readout)?;
                Ok(g.params.flatten_params()[slot * n..(slot + 1) * n].to_vec())
            },
        );
        out.push(record(name, n, grad_check(&f, &full[slot * n..(slot + 1) * n], GRAD_EPS)?));
    }

    let fv = Objective::new(
        |x: &[f64]| {
            let vv = Tensor::new(vec![5, DIM], x.to_vec())?;
            Ok(dot(gated_inject(&vv, &info, &base, &cfg)?.data(), readout.data()))
        },
        |x: &[f64]| {
            let vv = Tensor::new(vec![5, DIM], x.to_vec())?;
            Ok(gated_inject_backward(&vv, &info, &base, &cfg, 1.0, &readout)?.d_v.into_data())
        },
    );
    out.push(record("iea.visual_tokens", v.len(), grad_check(&fv, v.data(), GRAD_EPS)?));

    let fi = Objective::new(
        |x: &[f64]| {
            let rows: Vec<&[f64]> = x.chunks(DIM).collect();
            Ok(dot(gated_inject(&v, &rows, &base, &cfg)?.data(), readout.data()))
        },
        |x: &[f64]| {
            let rows: Vec<&[f64]> = x.chunks(DIM).collect();
            let g = gated_inject_backward(&v, &rows, &base, &cfg, 1.0, &readout)?;
            Ok(g.d_info.expect("info rows present").into_data())
        },
    );
    out.push(record("iea.info_tokens", info_t.len(), grad_check(&fi, info_t.data(), GRAD_EPS)?));
    Ok(())
}

fn triplet_checks(seed: u64, out: &mut Vec<GradCheckResult>) -> Result<()> {
    let base = TripletEncoder::seeded(seed, TEXT_DIM, DIM);
    let phrases: Vec<Vec<f64>> = (0..3).map(|i| gaussian_vec(&mut substream(seed + i, "gc-triplet-phrase"), TEXT_DIM)).collect();
    let refs = [phrases[0].as_slice(), &phrases[1], &phrases[2]];
    let readout = tensor(&[3, DIM], seed, "gc-triplet-readout");
    let flat = base.flatten();
    let n_proj = flat.len() - base.attention.param_count();

    let with = |x: &[f64]| {
        let mut e = base.clone();
        e.load_flat(x);
        e
    };
    let value = |e: &TripletEncoder| -> Result<f64> {
        let rows = e.embed_vectors(refs)?;
        Ok(rows[..3].iter().zip(0..3).map(|(r, i)| dot(r, readout.row(i))).sum())
    };
    let f = Objective::new(
        |x: &[f64]| {
            let mut full = flat.clone();
            full[..n_proj].copy_from_slice(x);
            value(&with(&full))
        },
        |x: &[f64]| {
            let mut full = flat.clone();
            full[..n_proj].copy_from_slice(x);
            Ok(with(&full).parameter_gradient(refs, &readout)?[..n_proj].to_vec())
        },
    );
    out.push(record("triplet.projections", n_proj, grad_check(&f, &flat[..n_proj], GRAD_EPS)?));

    let fa = Objective::new(
        |x: &[f64]| {
            let mut full = flat.clone();
            full[n_proj..].copy_from_slice(x);
            value(&with(&full))
        },
        |x: &[f64]| {
            let mut full = flat.clone();
            full[n_proj..].copy_from_slice(x);
            Ok(with(&full).parameter_gradient(refs, &readout)?[n_proj..].to_vec())
        },
    );
    out.push(record("triplet.attention", flat.len() - n_proj, grad_check(&fa, &flat[n_proj..], GRAD_EPS)?));
    Ok(())
}

fn ecn_checks(seed: u64, out: &mut Vec<GradCheckResult>) -> Result<()> {
    let params = EcnParams::seeded(seed, TEXT_DIM, DIM, &EcnConfig::default())?;
    let v = tensor(&[MAP, MAP, DIM], seed, "gc-ecn-v");
    let es = gaussian_vec(&mut substream(seed, "gc-ecn-es"), TEXT_DIM);
    let eo = gaussian_vec(&mut substream(seed, "gc-ecn-eo"), TEXT_DIM);
    let readout = tensor(&[MAP, MAP, DIM], seed, "gc-ecn-readout");
    let shape = vec![MAP, MAP, DIM];

    let fv = Objective::new(
        |x: &[f64]| {
            let vv = Tensor::new(shape.clone(), x.to_vec())?;
            Ok(dot(entity_control(&vv, &es, &eo, &params)?.fused.map.data(), readout.data()))
        },
        |x: &[f64]| {
            let vv = Tensor::new(shape.clone(), x.to_vec())?;
            Ok(entity_control_backward(&vv, &es, &eo, &params, &readout)?.d_v.into_data())
        },
    );
    out.push(record("ecn.feature_map", v.len(), grad_check(&fv, v.data(), GRAD_EPS)?));

    let fe = Objective::new(
        |x: &[f64]| {
            let (s, o) = x.split_at(TEXT_DIM);
            Ok(dot(entity_control(&v, s, o, &params)?.fused.map.data(), readout.data()))
        },
        |x: &[f64]| {
            let (s, o) = x.split_at(TEXT_DIM);
            let g = entity_control_backward(&v, s, o, &params, &readout)?;
            Ok([g.d_subject, g.d_object].concat())
        },
    );
    let e0 = [es.clone(), eo.clone()].concat();
    out.push(record("ecn.entity_embeddings", e0.len(), grad_check(&fe, &e0, GRAD_EPS)?));
    Ok(())
}

fn explicit_mlp_check(seed: u64, out: &mut Vec<GradCheckResult>) -> Result<()> {
    let in_dim = TEXT_DIM + 8 * 2;
    let base = Mlp::seeded(in_dim, in_dim, DIM, &mut substream(seed, "gc-mlp"));
    let x = gaussian_vec(&mut substream(seed, "gc-mlp-x"), in_dim);
    let r = gaussian_vec(&mut substream(seed, "gc-mlp-r"), DIM);
    let with = |p: &[f64]| {
        let mut m = base.clone();
        m.load_flat(p);
        m
    };
    let f = Objective::new(
        |p: &[f64]| Ok(dot(&with(p).apply(&x)?, &r)),
        |p: &[f64]| {
            let (_, g) = with(p).backward(&x, &r)?;
            Ok(g.flatten())
        },
    );
    let flat = base.flatten();
    out.push(record("explicit.projection_mlp", flat.len(), grad_check(&f, &flat, GRAD_EPS)?));
    Ok(())
}

/// Runs every check with parameters drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    iea_checks(seed, &mut out)?;
    triplet_checks(seed, &mut out)?;
    ecn_checks(seed, &mut out)?;
    explicit_mlp_check(seed, &mut out)?;
    Ok(out)
}
