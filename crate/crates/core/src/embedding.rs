//! Explicit interaction tokens: phrase embeddings plus Fourier box features
//! projected by the object/action MLPs, then offset by a per-instance
//! embedding `q_i` and shared role embeddings.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, HOIInstance};
use crate::error::{json_parse_error, Error, Result};
use crate::numerics::{l2_norm, Mlp};
use crate::rng::{gaussian_vec, indexed_substream, keyed_substream, substream};

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_TOKEN_DIM: usize = 64;
pub const DEFAULT_FOURIER_FREQS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderBackend {
    /// Hash-seeded Gaussian bag of tokens, L2-normalized.
    Surrogate { seed: u64 },
    /// Fixed phrase → vector table loaded from disk.
    Table(BTreeMap<String, Vec<f64>>),
}

/// Stand-in for the text encoder: maps a phrase to a `dim`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEmbedder {
    backend: EmbedderBackend,
    dim: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

/// Lowercases and collapses whitespace.
pub fn normalize_phrase(phrase: &str) -> String {
    phrase.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

impl PhraseEmbedder {
    pub fn surrogate(seed: u64, dim: usize) -> Self {
        PhraseEmbedder { backend: EmbedderBackend::Surrogate { seed }, dim }
    }

    /// Parses `{"dim": int, "entries": {"phrase": [floats]}}`.
    pub fn from_table_json(text: &str) -> Result<Self> {
        let table: TableFile = serde_json::from_str(text).map_err(|e| json_parse_error(text, &e))?;
        if table.dim == 0 {
            return Err(Error::validation("embedding table dim must be positive"));
        }
        for (phrase, v) in &table.entries {
            if v.len() != table.dim {
                return Err(Error::validation(format!(
                    "embedding for {phrase:?} has {} values, table dim is {}",
                    v.len(),
                    table.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("embedding for {phrase:?} is not finite")));
            }
        }
        Ok(PhraseEmbedder { backend: EmbedderBackend::Table(table.entries), dim: table.dim })
    }

    pub fn load_table(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_table_json(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend(&self) -> &EmbedderBackend {
        &self.backend
    }

    pub fn embed_phrase(&self, phrase: &str) -> Result<Vec<f64>> {
        let normalized = normalize_phrase(phrase);
        if normalized.is_empty() {
            return Err(Error::argument("cannot embed an empty phrase"));
        }
        match &self.backend {
            EmbedderBackend::Surrogate { seed } => {
                let mut acc = vec![0.0; self.dim];
                for token in normalized.split(' ') {
                    let mut rng = keyed_substream(*seed, "phrase-token", token.as_bytes());
                    for (a, g) in acc.iter_mut().zip(gaussian_vec(&mut rng, self.dim)) {
                        *a += g;
                    }
                }
                let norm = l2_norm(&acc);
                Ok(acc.into_iter().map(|v| v / norm).collect())
            }
            EmbedderBackend::Table(entries) => entries
                .get(phrase)
                .or_else(|| entries.get(&normalized))
                .cloned()
                .ok_or_else(|| Error::Lookup(phrase.to_string())),
        }
    }
}

/// Sinusoidal box features: for each coordinate (x0, y0, x1, y1) and each
/// `k < freqs`, the pair `(sin(2^k·π·c), cos(2^k·π·c))`, coordinate-major.
pub fn fourier_embed_box(b: &BBox, freqs: usize) -> Result<Vec<f64>> {
    if freqs == 0 {
        return Err(Error::argument("fourier embedding needs at least one frequency"));
    }
    let mut out = Vec::with_capacity(8 * freqs);
    for c in b.coords() {
        for k in 0..freqs {
            let arg = (1u64 << k) as f64 * PI * c;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(out)
}

/// Role embeddings shared by every instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleEmbeddings {
    pub subject: Vec<f64>,
    pub action: Vec<f64>,
    pub object: Vec<f64>,
}

impl RoleEmbeddings {
    pub fn seeded(seed: u64, dim: usize) -> Self {
        let mut rng = substream(seed, "role-embeddings");
        let scale = 1.0 / (dim as f64).sqrt();
        let mut draw = || gaussian_vec(&mut rng, dim).into_iter().map(|v| v * scale).collect();
        RoleEmbeddings { subject: draw(), action: draw(), object: draw() }
    }
}

/// Deterministic per-index instance embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceTable {
    seed: u64,
    dim: usize,
    scale: f64,
}

impl InstanceTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        InstanceTable { seed, dim, scale: 1.0 / (dim as f64).sqrt() }
    }

    /// Table returning the zero vector for every index.
    pub fn zeros(dim: usize) -> Self {
        InstanceTable { seed: 0, dim, scale: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, index: usize) -> Vec<f64> {
        if self.scale == 0.0 {
            return vec![0.0; self.dim];
        }
        let mut rng = indexed_substream(self.seed, "instance-embedding", index as u64);
        gaussian_vec(&mut rng, self.dim).into_iter().map(|v| v * self.scale).collect()
    }
}

/// Object MLP (shared by subject and object tokens) and action MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMlps {
    pub object: Mlp,
    pub action: Mlp,
    pub fourier_freqs: usize,
}

impl ProjectionMlps {
    pub fn seeded(seed: u64, text_dim: usize, token_dim: usize, fourier_freqs: usize) -> Self {
        let in_dim = text_dim + 8 * fourier_freqs;
        let hidden = in_dim;
        ProjectionMlps {
            object: Mlp::seeded(in_dim, hidden, token_dim, &mut substream(seed, "mlp-object")),
            action: Mlp::seeded(in_dim, hidden, token_dim, &mut substream(seed, "mlp-action")),
            fourier_freqs,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.object.out_dim()
    }

    fn project(mlp: &Mlp, phrase_vec: &[f64], b: &BBox, freqs: usize) -> Result<Vec<f64>> {
        let mut input = phrase_vec.to_vec();
        input.extend(fourier_embed_box(b, freqs)?);
        if input.len() != mlp.in_dim() {
            return Err(Error::argument(format!(
                "projection MLP expects {} inputs, phrase+box features give {}",
                mlp.in_dim(),
                input.len()
            )));
        }
        mlp.apply(&input)
    }

    pub fn project_entity(&self, phrase_vec: &[f64], b: &BBox) -> Result<Vec<f64>> {
        Self::project(&self.object, phrase_vec, b, self.fourier_freqs)
    }

    pub fn project_action(&self, phrase_vec: &[f64], b: &BBox) -> Result<Vec<f64>> {
        Self::project(&self.action, phrase_vec, b, self.fourier_freqs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedTokens {
    pub h_s: Vec<f64>,
    pub h_a: Vec<f64>,
    pub h_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InteractionTokens {
    pub instance_index: usize,
    pub e_s: Vec<f64>,
    pub e_a: Vec<f64>,
    pub e_o: Vec<f64>,
    pub h_s: Vec<f64>,
    pub h_a: Vec<f64>,
    pub h_o: Vec<f64>,
    pub q: Vec<f64>,
    pub r_s: Vec<f64>,
    pub r_a: Vec<f64>,
    pub r_o: Vec<f64>,
}

impl InteractionTokens {
    pub fn triple(&self) -> [&[f64]; 3] {
        [&self.e_s, &self.e_a, &self.e_o]
    }
}

pub fn project_tokens(instance: &HOIInstance, embedder: &PhraseEmbedder, mlps: &ProjectionMlps) -> Result<ProjectedTokens> {
    let s = embedder.embed_phrase(&instance.subject_phrase)?;
    let a = embedder.embed_phrase(&instance.action_phrase)?;
    let o = embedder.embed_phrase(&instance.object_phrase)?;
    Ok(ProjectedTokens {
        h_s: mlps.project_entity(&s, &instance.subject_box)?,
        h_a: mlps.project_action(&a, &instance.action_box())?,
        h_o: mlps.project_entity(&o, &instance.object_box)?,
    })
}

pub fn assemble_interaction_tokens(
    projected: ProjectedTokens,
    instance_index: usize,
    roles: &RoleEmbeddings,
    q_table: &InstanceTable,
) -> Result<InteractionTokens> {
    let d = projected.h_s.len();
    let dims = [
        projected.h_a.len(),
        projected.h_o.len(),
        roles.subject.len(),
        roles.action.len(),
        roles.object.len(),
        q_table.dim(),
    ];
    if dims.iter().any(|&x| x != d) {
        return Err(Error::argument(format!("token dims disagree: {d} vs {dims:?}")));
    }
    let q = q_table.get(instance_index);
    let sum = |h: &[f64], r: &[f64]| -> Vec<f64> { h.iter().zip(&q).zip(r).map(|((h, q), r)| h + q + r).collect() };
    Ok(InteractionTokens {
        instance_index,
        e_s: sum(&projected.h_s, &roles.subject),
        e_a: sum(&projected.h_a, &roles.action),
        e_o: sum(&projected.h_o, &roles.object),
        h_s: projected.h_s,
        h_a: projected.h_a,
        h_o: projected.h_o,
        q,
        r_s: roles.subject.clone(),
        r_a: roles.action.clone(),
        r_o: roles.object.clone(),
    })
}

/// Everything needed to turn an annotated instance into explicit tokens.
#[derive(Debug, Clone)]
pub struct ExplicitEncoder {
    pub embedder: PhraseEmbedder,
    pub mlps: ProjectionMlps,
    pub roles: RoleEmbeddings,
    pub instances: InstanceTable,
}

impl ExplicitEncoder {
    pub fn seeded(seed: u64, text_dim: usize, token_dim: usize, fourier_freqs: usize) -> Self {
        ExplicitEncoder {
            embedder: PhraseEmbedder::surrogate(seed, text_dim),
            mlps: ProjectionMlps::seeded(seed, text_dim, token_dim, fourier_freqs),
            roles: RoleEmbeddings::seeded(seed, token_dim),
            instances: InstanceTable::new(seed, token_dim),
        }
    }

    pub fn encode(&self, instance: &HOIInstance) -> Result<InteractionTokens> {
        let projected = project_tokens(instance, &self.embedder, &self.mlps)?;
        assemble_interaction_tokens(projected, instance.instance_index, &self.roles, &self.instances)
    }

    /// Action token for an arbitrary raw action vector, reusing the instance's
    /// action box, instance embedding and action role.
    pub fn encode_action(&self, raw_action: &[f64], instance: &HOIInstance) -> Result<Vec<f64>> {
        let h = self.mlps.project_action(raw_action, &instance.action_box())?;
        let q = self.instances.get(instance.instance_index);
        Ok(h.iter().zip(&q).zip(&self.roles.action).map(|((h, q), r)| h + q + r).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_bbox;
    use proptest::prelude::*;

    fn instance(idx: usize) -> HOIInstance {
        HOIInstance {
            subject_phrase: "person".into(),
            action_phrase: "riding".into(),
            object_phrase: "horse".into(),
            subject_box: validate_bbox([0.1, 0.1, 0.5, 0.6], None).unwrap(),
            object_box: validate_bbox([0.3, 0.4, 0.9, 0.95], None).unwrap(),
            instance_index: idx,
        }
    }

    #[test]
    fn surrogate_is_deterministic_and_unit_norm() {
        let e = PhraseEmbedder::surrogate(489, 64);
        let a = e.embed_phrase("person").unwrap();
        assert_eq!(a, e.embed_phrase("person").unwrap());
        assert_eq!(a, e.embed_phrase("  Person ").unwrap());
        assert!((l2_norm(&a) - 1.0).abs() <= 1e-12);
        assert_ne!(a, e.embed_phrase("horse").unwrap());
        assert!(matches!(e.embed_phrase("   "), Err(Error::Argument(_))));
    }

    #[test]
    fn table_lookup() {
        let e = PhraseEmbedder::from_table_json(r#"{"dim":4,"entries":{"riding":[0.5,-1.0,2.0,0.25]}}"#).unwrap();
        assert_eq!(e.embed_phrase("riding").unwrap(), vec![0.5, -1.0, 2.0, 0.25]);
        match e.embed_phrase("jumping") {
            Err(Error::Lookup(p)) => assert_eq!(p, "jumping"),
            other => panic!("{other:?}"),
        }
        assert!(PhraseEmbedder::from_table_json(r#"{"dim":3,"entries":{"x":[1.0]}}"#).is_err());
    }

    #[test]
    fn fourier_examples() {
        let full = BBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };
        let f = fourier_embed_box(&full, 4).unwrap();
        assert_eq!(f.len(), 32);
        for k in 0..4 {
            // coordinate 0 → (0, 1)
            assert_eq!((f[2 * k], f[2 * k + 1]), (0.0, 1.0));
            // coordinate 1 (x1) → (0, ±1)
            let (s, c) = (f[16 + 2 * k], f[16 + 2 * k + 1]);
            assert!(s.abs() < 1e-12);
            assert!((c - if k == 0 { -1.0 } else { 1.0 }).abs() < 1e-12);
        }

        let half = BBox { x0: 0.5, y0: 0.25, x1: 0.75, y1: 0.5 };
        let f1 = fourier_embed_box(&half, 1).unwrap();
        assert!((f1[0] - 1.0).abs() < 1e-15 && f1[1].abs() < 1e-15);
        let f2 = fourier_embed_box(&half, 2).unwrap();
        let r = 2f64.sqrt() / 2.0;
        // y0 = 0.25: k=0 → (√2/2, √2/2), k=1 → (1, 0)
        assert!((f2[4] - r).abs() < 1e-15 && (f2[5] - r).abs() < 1e-15);
        assert!((f2[6] - 1.0).abs() < 1e-15 && f2[7].abs() < 1e-15);
        assert!(fourier_embed_box(&half, 0).is_err());
    }

    proptest! {
        #[test]
        fn fourier_pairs_lie_on_unit_circle(raw in prop::array::uniform4(0.0f64..1.0), freqs in 1usize..10) {
            let b = BBox { x0: raw[0], y0: raw[1], x1: raw[2], y1: raw[3] };
            let f = fourier_embed_box(&b, freqs).unwrap();
            for pair in f.chunks(2) {
                prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_mlps_give_biases_and_shared_object_mlp() {
        let mut mlps = ProjectionMlps::seeded(1, 16, 8, 2);
        let emb = PhraseEmbedder::surrogate(1, 16);
        let p = project_tokens(&instance(0), &emb, &mlps).unwrap();
        assert_ne!(p.h_s, p.h_o);

        let mut same = instance(0);
        same.object_phrase = same.subject_phrase.clone();
        same.object_box = same.subject_box;
        let p = project_tokens(&same, &emb, &mlps).unwrap();
        assert_eq!(p.h_s, p.h_o);

        mlps.object = Mlp::zeros(32, 32, 8);
        mlps.object.output = crate::numerics::LinearLayer::new(
            crate::numerics::Tensor::zeros(&[8, 32]),
            vec![0.5; 8],
        )
        .unwrap();
        mlps.action = Mlp::zeros(32, 32, 8);
        let p = project_tokens(&instance(0), &emb, &mlps).unwrap();
        assert_eq!(p.h_s, vec![0.5; 8]);
        assert_eq!(p.h_o, vec![0.5; 8]);
        assert_eq!(p.h_a, vec![0.0; 8]);
    }

    #[test]
    fn projection_is_bitwise_stable() {
        let a = ExplicitEncoder::seeded(489, 64, 64, 8).encode(&instance(0)).unwrap();
        let b = ExplicitEncoder::seeded(489, 64, 64, 8).encode(&instance(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mlps = ProjectionMlps::seeded(1, 16, 8, 2);
        let emb = PhraseEmbedder::surrogate(1, 12);
        assert!(matches!(project_tokens(&instance(0), &emb, &mlps), Err(Error::Argument(_))));
        let proj = ProjectedTokens { h_s: vec![0.0; 4], h_a: vec![0.0; 4], h_o: vec![0.0; 3] };
        let roles = RoleEmbeddings::seeded(0, 4);
        assert!(assemble_interaction_tokens(proj, 0, &roles, &InstanceTable::new(0, 4)).is_err());
    }

    #[test]
    fn residual_identity_and_shared_roles() {
        let enc = ExplicitEncoder::seeded(489, 64, 64, 8);
        let t0 = enc.encode(&instance(0)).unwrap();
        let t1 = enc.encode(&instance(1)).unwrap();
        for t in [&t0, &t1] {
            for i in 0..64 {
                let qs = t.e_s[i] - t.h_s[i] - t.r_s[i];
                let qa = t.e_a[i] - t.h_a[i] - t.r_a[i];
                let qo = t.e_o[i] - t.h_o[i] - t.r_o[i];
                assert!((qs - t.q[i]).abs() < 1e-15 && (qa - t.q[i]).abs() < 1e-15 && (qo - t.q[i]).abs() < 1e-15);
            }
        }
        assert_ne!(t0.q, t1.q);
        assert_eq!((&t0.r_s, &t0.r_a, &t0.r_o), (&t1.r_s, &t1.r_a, &t1.r_o));
    }

    #[test]
    fn zero_inputs_give_zero_tokens() {
        let zeros = ProjectedTokens { h_s: vec![0.0; 4], h_a: vec![0.0; 4], h_o: vec![0.0; 4] };
        let roles = RoleEmbeddings { subject: vec![0.0; 4], action: vec![0.0; 4], object: vec![0.0; 4] };
        let t = assemble_interaction_tokens(zeros, 2, &roles, &InstanceTable::zeros(4)).unwrap();
        for e in t.triple() {
            assert_eq!(e, &[0.0; 4]);
        }
    }

    #[test]
    fn role_embeddings_round_trip_bitwise() {
        let roles = RoleEmbeddings::seeded(489, 64);
        let text = serde_json::to_string(&roles).unwrap();
        let back: RoleEmbeddings = serde_json::from_str(&text).unwrap();
        for (a, b) in roles.subject.iter().zip(&back.subject) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(roles, back);
        assert_eq!(roles, RoleEmbeddings::seeded(489, 64));
    }
}
