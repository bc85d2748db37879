//! Toy latent diffusion: a seed-initialised transformer denoiser whose blocks
//! run self-attention, interaction attention, entity control with
//! cross-attention, and a feed-forward layer, sampled with PLMS or DDIM.

use std::collections::VecDeque;
use std::path::Path;

use serde::Serialize;

use crate::action_offset::{scene_offset_groups, ActionCluster, OffsetGroup};
use crate::config::{Config, ModelConfig, SamplerMethod};
use crate::dataset::PromptScene;
use crate::ecn::{ecn_combine, entity_control, EcnConfig, EcnParams, SoftMask};
use crate::embedding::{ExplicitEncoder, InteractionTokens, PhraseEmbedder};
use crate::error::{Error, Result};
use crate::f64file;
use crate::iea::{iea_forward, schedule_active, IeaConfig};
use crate::implicit_mining::{deep_embed_triplet, mine_implicit, ImplicitTokens, LlmClient, Triplet, TripletEncoder};
use crate::numerics::{attend, self_attention, AttentionParams, LinearLayer, Mlp, Parameters, Tensor};
use crate::rng::{gaussian_vec, indexed_substream, substream};

/// Linear β schedule over the training timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::argument("schedule needs at least one timestep"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::argument(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let denom = (train_steps.max(2) - 1) as f64;
        let betas: Vec<f64> =
            (0..train_steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom).collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas_cumprod })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `ᾱ_t`, with `ᾱ = 1` before the first timestep.
    pub fn alpha_bar(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alphas_cumprod[t as usize]
        }
    }

    /// Evenly spaced sampling timesteps, descending, and their spacing.
    pub fn timesteps(&self, steps: usize) -> Result<(Vec<i64>, i64)> {
        if steps == 0 || steps > self.train_steps() {
            return Err(Error::argument(format!("steps must be in 1..={}, got {steps}", self.train_steps())));
        }
        let ratio = (self.train_steps() / steps) as i64;
        Ok(((0..steps as i64).rev().map(|i| i * ratio).collect(), ratio))
    }

    /// Forward process `√ᾱ·x0 + √(1−ᾱ)·ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: i64) -> Result<Tensor> {
        let a = self.alpha_bar(t);
        let mut out = x0.scale(a.sqrt());
        out.axpy((1.0 - a).sqrt(), eps)?;
        Ok(out)
    }
}

/// Deterministic transfer from `ᾱ` to `ᾱ'` given a noise estimate.
pub fn transfer(x: &Tensor, eps: &Tensor, alpha: f64, alpha_prev: f64) -> Result<Tensor> {
    let x0_coef = alpha_prev.sqrt() / alpha.sqrt();
    let eps_coef = (1.0 - alpha_prev).sqrt() - x0_coef * (1.0 - alpha).sqrt();
    let mut out = x.scale(x0_coef);
    out.axpy(eps_coef, eps)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceMasks {
    pub instance_index: usize,
    pub subject: SoftMask,
    pub object: SoftMask,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Tensor,
    /// Entity masks from the last block, when the model has any.
    pub masks: Vec<InstanceMasks>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepConditioning {
    pub iea_strength: f64,
    pub explicit_tokens: usize,
    pub implicit_tokens: usize,
    pub offset_tokens: usize,
    pub ecn_enabled: bool,
}

pub trait Denoiser {
    /// Noise estimate for `latent` at training timestep `timestep`, during
    /// sampling step `step` of `total`.
    fn predict(&self, latent: &Tensor, timestep: i64, step: usize, total: usize) -> Result<Prediction>;

    fn conditioning(&self, _step: usize, _total: usize) -> StepConditioning {
        StepConditioning::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Prk,
    Ab4,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    pub timestep: i64,
    pub prev_timestep: i64,
    pub mode: StepMode,
    pub evaluations: usize,
    #[serde(flatten)]
    pub conditioning: StepConditioning,
}

#[derive(Debug, Clone)]
pub struct DenoiseState {
    pub latent: Tensor,
    pub step: usize,
    pub eps_history: VecDeque<Tensor>,
    pub trace: Vec<TraceEntry>,
    pub masks: Vec<InstanceMasks>,
}

impl DenoiseState {
    pub fn new(latent: Tensor) -> Self {
        DenoiseState { latent, step: 0, eps_history: VecDeque::new(), trace: Vec::new(), masks: Vec::new() }
    }

    fn push_eps(&mut self, eps: Tensor) {
        self.eps_history.push_front(eps);
        self.eps_history.truncate(4);
    }
}

fn combine(parts: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut out = parts[0].1.scale(parts[0].0);
    for (c, t) in &parts[1..] {
        out.axpy(*c, t)?;
    }
    Ok(out)
}

/// Pseudo linear multistep sampling: three pseudo Runge–Kutta warm-up steps,
/// then fourth-order Adams–Bashforth on the noise-estimate history.
pub fn plms_sample<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x_init: Tensor,
    steps: usize,
) -> Result<DenoiseState> {
    if steps < 4 {
        return Err(Error::argument(format!("PLMS needs at least 4 steps, got {steps}; use DDIM")));
    }
    let (timesteps, ratio) = schedule.timesteps(steps)?;
    let mut state = DenoiseState::new(x_init);
    for (i, &t) in timesteps.iter().enumerate() {
        let prev = t - ratio;
        let (a_t, a_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let x = &state.latent;
        let (next, mode, evaluations) = if i < 3 {
            let mid = t - ratio / 2;
            let a_mid = schedule.alpha_bar(mid);
            let e1 = denoiser.predict(x, t, i, steps)?.eps;
            let x1 = transfer(x, &e1, a_t, a_mid)?;
            let e2 = denoiser.predict(&x1, mid, i, steps)?.eps;
            let x2 = transfer(x, &e2, a_t, a_mid)?;
            let e3 = denoiser.predict(&x2, mid, i, steps)?.eps;
            let x3 = transfer(x, &e3, a_t, a_prev)?;
            let last = denoiser.predict(&x3, prev.max(0), i, steps)?;
            let e_prime = combine(&[
                (1.0 / 6.0, &e1),
                (2.0 / 6.0, &e2),
                (2.0 / 6.0, &e3),
                (1.0 / 6.0, &last.eps),
            ])?;
            let next = transfer(x, &e_prime, a_t, a_prev)?;
            state.masks = last.masks;
            state.push_eps(e1);
            (next, StepMode::Prk, 4)
        } else {
            let pred = denoiser.predict(x, t, i, steps)?;
            let h = &state.eps_history;
            let e_prime = combine(&[
                (55.0 / 24.0, &pred.eps),
                (-59.0 / 24.0, &h[0]),
                (37.0 / 24.0, &h[1]),
                (-9.0 / 24.0, &h[2]),
            ])?;
            state.masks = pred.masks;
            let next = transfer(x, &e_prime, a_t, a_prev)?;
            state.push_eps(pred.eps);
            (next, StepMode::Ab4, 1)
        };
        check_finite(&next, i)?;
        state.latent = next;
        state.trace.push(TraceEntry {
            step: i,
            timestep: t,
            prev_timestep: prev,
            mode,
            evaluations,
            conditioning: denoiser.conditioning(i, steps),
        });
        state.step = i + 1;
    }
    Ok(state)
}

/// Deterministic DDIM (η = 0).
pub fn ddim_sample<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x_init: Tensor,
    steps: usize,
) -> Result<DenoiseState> {
    let (timesteps, ratio) = schedule.timesteps(steps)?;
    let mut state = DenoiseState::new(x_init);
    for (i, &t) in timesteps.iter().enumerate() {
        let prev = t - ratio;
        let pred = denoiser.predict(&state.latent, t, i, steps)?;
        let next = transfer(&state.latent, &pred.eps, schedule.alpha_bar(t), schedule.alpha_bar(prev))?;
        check_finite(&next, i)?;
        state.latent = next;
        state.masks = pred.masks;
        state.trace.push(TraceEntry {
            step: i,
            timestep: t,
            prev_timestep: prev,
            mode: StepMode::Ddim,
            evaluations: 1,
            conditioning: denoiser.conditioning(i, steps),
        });
        state.step = i + 1;
    }
    Ok(state)
}

fn check_finite(t: &Tensor, step: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("latent became non-finite at sampling step {step}")))
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub iea: AttentionParams,
    pub ecn: EcnParams,
    pub cross_attn: AttentionParams,
    pub ff: Mlp,
}

impl Parameters for BlockParams {
    fn flatten(&self) -> Vec<f64> {
        let mut v = self.self_attn.flatten();
        v.extend(self.iea.flatten());
        v.extend(self.ecn.flatten());
        v.extend(self.cross_attn.flatten());
        v.extend(self.ff.flatten());
        v
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut take = |p: &mut dyn Parameters| {
            let n = p.param_count();
            p.load_flat(&flat[off..off + n]);
            off += n;
        };
        take(&mut self.self_attn);
        take(&mut self.iea);
        take(&mut self.ecn);
        take(&mut self.cross_attn);
        take(&mut self.ff);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyModel {
    pub blocks: Vec<BlockParams>,
    pub prompt_proj: LinearLayer,
    pub head: LinearLayer,
    pub latent_size: usize,
    pub dim: usize,
}

impl ToyModel {
    pub fn seeded(seed: u64, model: &ModelConfig, ecn: &EcnConfig) -> Result<Self> {
        let d = model.dim;
        let blocks = (0..model.blocks)
            .map(|b| {
                let b = b as u64;
                Ok(BlockParams {
                    self_attn: AttentionParams::seeded(d, &mut indexed_substream(seed, "init-self-attn", b)),
                    iea: AttentionParams::seeded(d, &mut indexed_substream(seed, "init-iea", b)),
                    ecn: EcnParams::seeded(seed.wrapping_add(b), model.text_dim, d, ecn)?,
                    cross_attn: AttentionParams::seeded(d, &mut indexed_substream(seed, "init-cross-attn", b)),
                    ff: Mlp::seeded(d, 2 * d, d, &mut indexed_substream(seed, "init-ff", b)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ToyModel {
            blocks,
            prompt_proj: LinearLayer::seeded(model.text_dim, d, &mut substream(seed, "init-prompt-proj")),
            head: LinearLayer::seeded(d, d, &mut substream(seed, "init-head")),
            latent_size: model.latent_size,
            dim: d,
        })
    }

    /// Zeroes cross-attention values and the feed-forward layers so that,
    /// together with γ = 0 and ECN disabled, each block reduces to its
    /// self-attention residual.
    pub fn zero_gates(&mut self) {
        for b in &mut self.blocks {
            b.cross_attn.w_v = Tensor::zeros(b.cross_attn.w_v.shape());
            b.ff = Mlp::zeros(self.dim, 2 * self.dim, self.dim);
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_size, self.latent_size, self.dim]
    }
}

impl Parameters for ToyModel {
    fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.blocks.iter().flat_map(|b| b.flatten()).collect();
        v.extend(self.prompt_proj.flatten());
        v.extend(self.head.flatten());
        v
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in &mut self.blocks {
            let n = b.param_count();
            b.load_flat(&flat[off..off + n]);
            off += n;
        }
        let n = self.prompt_proj.param_count();
        self.prompt_proj.load_flat(&flat[off..off + n]);
        self.head.load_flat(&flat[off + n..]);
    }
}

/// Everything a scene contributes to the denoiser.
#[derive(Debug, Clone, Serialize)]
pub struct Conditioning {
    pub explicit: Vec<InteractionTokens>,
    pub implicit: Vec<ImplicitTokens>,
    pub offsets: Vec<OffsetGroup>,
    /// Subject and object phrase embeddings per instance, for the entity masks.
    pub entities: Vec<(Vec<f64>, Vec<f64>)>,
    /// Prompt word embeddings `[n × text_dim]`.
    pub prompt_tokens: Tensor,
}

/// Word-level prompt embeddings; words a lookup table lacks are skipped and
/// the instance phrases are used if nothing remains.
pub fn prompt_tokens(scene: &PromptScene, embedder: &PhraseEmbedder) -> Result<Tensor> {
    let mut rows = Vec::new();
    for word in scene.prompt.split_whitespace() {
        match embedder.embed_phrase(word) {
            Ok(v) => rows.push(v),
            Err(Error::Lookup(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        for inst in &scene.instances {
            for p in [&inst.subject_phrase, &inst.action_phrase, &inst.object_phrase] {
                rows.push(embedder.embed_phrase(p)?);
            }
        }
    }
    Tensor::from_rows(&rows)
}

pub fn time_embedding(timestep: i64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = timestep as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}

/// One block: self-attention → IEA → ECN with cross-attention → feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    x: &Tensor,
    map_hw: (usize, usize),
    cond: &Conditioning,
    context: &Tensor,
    block: &BlockParams,
    iea: &IeaConfig,
    ecn_enabled: bool,
    step: usize,
    total: usize,
) -> Result<(Tensor, Vec<InstanceMasks>)> {
    let (h, w) = map_hw;
    let d = x.cols();
    let (sa, _) = self_attention(x, &block.self_attn)?;
    let x1 = x.add(&sa)?;
    let x2 = iea_forward(&x1, &cond.explicit, &cond.implicit, &cond.offsets, &block.iea, iea, step, total)?;
    let map = x2.reshape(vec![h, w, d])?;

    let mut masks = Vec::new();
    let mut fused = Tensor::zeros(&[h, w, d]);
    if ecn_enabled && !cond.entities.is_empty() {
        let scale = 1.0 / cond.entities.len() as f64;
        for (inst, (es, eo)) in cond.explicit.iter().zip(&cond.entities) {
            let ec = entity_control(&map, es, eo, &block.ecn)?;
            fused.axpy(scale, &ec.fused.map)?;
            masks.push(InstanceMasks {
                instance_index: inst.instance_index,
                subject: ec.subject_mask,
                object: ec.object_mask,
            });
        }
    }
    let cross = |q: &Tensor| -> Result<Tensor> {
        let rows = q.clone().reshape(vec![h * w, d])?;
        attend(&rows, context, &block.cross_attn)?.0.reshape(vec![h, w, d])
    };
    let x3 = ecn_combine(&map, &fused, cross)?.reshape(vec![h * w, d])?;
    let ff = block.ff.apply_rows(&x3)?;
    Ok((x3.add(&ff)?, masks))
}

/// The toy model bound to one scene's conditioning.
pub struct ToyDenoiser<'a> {
    model: &'a ToyModel,
    cond: &'a Conditioning,
    context: Tensor,
    iea: IeaConfig,
    ecn_enabled: bool,
}

impl<'a> ToyDenoiser<'a> {
    pub fn new(model: &'a ToyModel, cond: &'a Conditioning, iea: IeaConfig, ecn_enabled: bool) -> Result<Self> {
        let context = model.prompt_proj.apply_rows(&cond.prompt_tokens)?;
        Ok(ToyDenoiser { model, cond, context, iea, ecn_enabled })
    }
}

impl Denoiser for ToyDenoiser<'_> {
    fn predict(&self, latent: &Tensor, timestep: i64, step: usize, total: usize) -> Result<Prediction> {
        let [h, w, d] = self.model.latent_shape();
        if latent.shape() != [h, w, d] {
            return Err(Error::argument(format!("latent must be {:?}, got {:?}", [h, w, d], latent.shape())));
        }
        let temb = time_embedding(timestep, d);
        let mut x = latent.clone().reshape(vec![h * w, d])?;
        for r in 0..h * w {
            x.row_mut(r).iter_mut().zip(&temb).for_each(|(a, b)| *a += b);
        }
        let mut masks = Vec::new();
        for block in &self.model.blocks {
            let (next, m) = block_forward(&x, (h, w), self.cond, &self.context, block, &self.iea, self.ecn_enabled, step, total)?;
            x = next;
            masks = m;
        }
        let eps = self.model.head.apply_rows(&x)?.reshape(vec![h, w, d])?;
        Ok(Prediction { eps, masks })
    }

    fn conditioning(&self, step: usize, total: usize) -> StepConditioning {
        StepConditioning {
            iea_strength: schedule_active(step, total, &self.iea),
            explicit_tokens: 3 * self.cond.explicit.len(),
            implicit_tokens: 3 * self.cond.implicit.len(),
            offset_tokens: self.cond.offsets.iter().map(|g| 3 * g.groups.len()).sum(),
            ecn_enabled: self.ecn_enabled,
        }
    }
}

/// Tokens and clustering written next to the latent.
#[derive(Debug, Clone, Serialize)]
pub struct TokenDump {
    pub prompt: String,
    pub implicit_triplets: Vec<Triplet>,
    pub explicit: Vec<InteractionTokens>,
    pub implicit: Vec<ImplicitTokens>,
    pub cluster: ActionCluster,
    pub offsets: Vec<OffsetGroup>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub latent: Tensor,
    pub trace: Vec<TraceEntry>,
    pub masks: Vec<InstanceMasks>,
    pub tokens: TokenDump,
}

/// Seed-initialised components shared by every scene of a run.
pub struct Components {
    pub encoder: ExplicitEncoder,
    pub triplets: TripletEncoder,
    pub model: ToyModel,
    pub schedule: NoiseSchedule,
}

impl Components {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let m = &cfg.model;
        let mut encoder = ExplicitEncoder::seeded(cfg.seed, m.text_dim, m.dim, m.fourier_freqs);
        if let Some(path) = &cfg.paths.embedding_table {
            let table = PhraseEmbedder::load_table(path)?;
            if table.dim() != m.text_dim {
                return Err(Error::validation(format!(
                    "embedding table has dim {} but model.text_dim is {}",
                    table.dim(),
                    m.text_dim
                )));
            }
            encoder.embedder = table;
        }
        let s = &cfg.sampler;
        Ok(Components {
            encoder,
            triplets: TripletEncoder::seeded(cfg.seed, m.text_dim, m.dim),
            model: ToyModel::seeded(cfg.seed, m, &cfg.ecn)?,
            schedule: NoiseSchedule::linear(s.train_steps, s.beta_start, s.beta_end)?,
        })
    }
}

/// Mining (if needed), embedding and offset construction for one scene.
pub fn prepare_conditioning(
    scene: &PromptScene,
    cfg: &Config,
    parts: &Components,
    client: Option<&LlmClient>,
) -> Result<(Conditioning, TokenDump)> {
    let triplets = match (&scene.implicit_triplets, client) {
        (Some(t), _) => t.clone(),
        (None, Some(c)) => mine_implicit(c, &scene.prompt).map_err(|e| e.in_stage("mining"))?,
        (None, None) => Vec::new(),
    };
    let embed = || -> Result<_> {
        let explicit: Vec<InteractionTokens> =
            scene.instances.iter().map(|i| parts.encoder.encode(i)).collect::<Result<_>>()?;
        let implicit: Vec<ImplicitTokens> = triplets
            .iter()
            .map(|t| deep_embed_triplet(t, &parts.encoder.embedder, &parts.triplets))
            .collect::<Result<_>>()?;
        let entities = scene
            .instances
            .iter()
            .map(|i| {
                Ok((
                    parts.encoder.embedder.embed_phrase(&i.subject_phrase)?,
                    parts.encoder.embedder.embed_phrase(&i.object_phrase)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok((explicit, implicit, entities, prompt_tokens(scene, &parts.encoder.embedder)?))
    };
    let (explicit, implicit, entities, prompt) = embed().map_err(|e| e.in_stage("embedding"))?;
    let (cluster, offsets) = scene_offset_groups(scene, &explicit, &parts.encoder, &cfg.offsets, cfg.seed)
        .map_err(|e| e.in_stage("offset"))?;
    let dump = TokenDump {
        prompt: scene.prompt.clone(),
        implicit_triplets: triplets,
        explicit: explicit.clone(),
        implicit: implicit.clone(),
        cluster,
        offsets: offsets.clone(),
    };
    Ok((Conditioning { explicit, implicit, offsets, entities, prompt_tokens: prompt }, dump))
}

/// Initial Gaussian latent for a scene.
pub fn initial_latent(shape: [usize; 3], root_seed: u64, scene_seed: u64) -> Tensor {
    let mut rng = indexed_substream(root_seed, "noise", scene_seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(&mut rng, n)).expect("gaussian samples are finite")
}

/// End-to-end generation for one scene.
pub fn generate(scene: &PromptScene, cfg: &Config, parts: &Components, client: Option<&LlmClient>) -> Result<Bundle> {
    let (cond, tokens) = prepare_conditioning(scene, cfg, parts, client)?;
    let sample = || -> Result<DenoiseState> {
        let denoiser = ToyDenoiser::new(&parts.model, &cond, cfg.iea, cfg.ecn.enabled)?;
        let x = initial_latent(parts.model.latent_shape(), cfg.seed, scene.seed);
        match cfg.sampler.method {
            SamplerMethod::Plms => plms_sample(&denoiser, &parts.schedule, x, cfg.sampler.steps),
            SamplerMethod::Ddim => ddim_sample(&denoiser, &parts.schedule, x, cfg.sampler.steps),
        }
    };
    let state = sample().map_err(|e| e.in_stage("sampling"))?;
    Ok(Bundle { latent: state.latent, trace: state.trace, masks: state.masks, tokens })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::State(format!("serializing: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `latent.f64`, `trace.json`, `tokens.json` and `masks/*.f64` into `dir`.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    f64file::write(&dir.join("latent.f64"), &bundle.latent)?;
    write_json(&dir.join("trace.json"), &bundle.trace)?;
    write_json(&dir.join("tokens.json"), &bundle.tokens)?;
    for m in &bundle.masks {
        for (role, mask) in [("subject", &m.subject), ("object", &m.object)] {
            let t = Tensor::new(vec![mask.height, mask.width], mask.values.clone())?;
            f64file::write(&masks_dir.join(format!("instance{}_{role}.f64", m.instance_index)), &t)?;
        }
    }
    Ok(())
}
