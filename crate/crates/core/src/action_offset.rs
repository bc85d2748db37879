//! Action clustering and offset variants of the action token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PromptScene;
use crate::embedding::{ExplicitEncoder, InteractionTokens};
use crate::error::{Error, Result};
use crate::numerics::l2_norm;
use crate::rng::substream;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;
const DIRECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionCluster {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, followed by the final inertia.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ActionCluster {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid_of(&self, point_index: usize) -> Result<&[f64]> {
        let c = self
            .assignments
            .get(point_index)
            .ok_or_else(|| Error::argument(format!("point {point_index} is not part of the clustering")))?;
        Ok(&self.centroids[*c])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Greedy k-means++ seeding: each new centre is the best of a few
/// D²-weighted candidates.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weighted_pick(rng, &closest);
            let updated: Vec<f64> =
                points.iter().zip(&closest).map(|(p, &c)| c.min(sq_dist(p, &points[cand]))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, idx, updated) = best.expect("at least one trial");
        centroids.push(points[idx].clone());
        closest = updated;
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ActionCluster> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(Error::argument(format!("k must be in 1..={n}, got {k}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::argument("points have inconsistent dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("kmeans input contains non-finite values"));
    }
    let mut rng = substream(seed, "kmeans");
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        let inertia: f64 = dists.iter().sum();
        if let Some(&prev) = history.last() {
            debug_assert!(inertia <= prev * (1.0 + 1e-12) + f64::MIN_POSITIVE, "inertia rose: {prev} -> {inertia}");
        }
        history.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            let new = if counts[c] == 0 {
                let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).expect("n >= 1");
                dists[far] = 0.0;
                assignments[far] = c;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            movement = movement.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if movement < tol {
            break;
        }
    }
    let inertia = points.iter().zip(&assignments).map(|(p, &c)| sq_dist(p, &centroids[c])).sum();
    history.push(inertia);
    Ok(ActionCluster { centroids, assignments, inertia, inertia_history: history, iterations })
}

/// Moves `a` by `lambda` along the unit direction of the centroid itself.
pub fn global_offset(a: &[f64], c: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_dims(a, c)?;
    let norm = l2_norm(c);
    if norm <= DIRECTION_EPS {
        return Err(Error::DegenerateDirection(format!("centroid norm {norm:e} is too small for a global offset")));
    }
    Ok(a.iter().zip(c).map(|(a, c)| a + lambda * c / norm).collect())
}

/// Moves `a` by `lambda` along the unit vector pointing from `a` to `c`.
pub fn local_offset(a: &[f64], c: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_dims(a, c)?;
    let diff: Vec<f64> = c.iter().zip(a).map(|(c, a)| c - a).collect();
    let norm = l2_norm(&diff);
    if norm <= DIRECTION_EPS {
        return Err(Error::DegenerateDirection(format!("point lies on its centroid (distance {norm:e})")));
    }
    Ok(a.iter().zip(&diff).map(|(a, d)| a + lambda * d / norm).collect())
}

fn check_dims(a: &[f64], c: &[f64]) -> Result<()> {
    if a.len() != c.len() {
        return Err(Error::argument(format!("vector dim {} does not match centroid dim {}", a.len(), c.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetConfig {
    #[serde(default = "default_global")]
    pub global: Vec<f64>,
    #[serde(default = "default_local")]
    pub local: Vec<f64>,
    /// Cluster count; `None` means `min(2, n)`.
    #[serde(default)]
    pub k: Option<usize>,
}

fn default_global() -> Vec<f64> {
    vec![0.1, -0.1]
}

fn default_local() -> Vec<f64> {
    vec![0.05, -0.05]
}

impl Default for OffsetConfig {
    fn default() -> Self {
        OffsetConfig { global: default_global(), local: default_local(), k: None }
    }
}

impl OffsetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global.is_empty() || self.local.is_empty() {
            return Err(Error::validation("offsets.global and offsets.local must both be non-empty"));
        }
        if self.global.iter().chain(&self.local).any(|l| !l.is_finite()) {
            return Err(Error::validation("offset magnitudes must be finite"));
        }
        if self.k == Some(0) {
            return Err(Error::validation("offsets.k must be at least 1"));
        }
        Ok(())
    }

    pub fn cluster_count(&self, n: usize) -> usize {
        self.k.unwrap_or(n.min(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetLabel {
    pub kind: OffsetKind,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedOffset {
    pub kind: OffsetKind,
    pub lambda: f64,
    pub reason: String,
}

/// `G_0` (the original triple) followed by one triple per applied offset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetGroup {
    pub instance_index: usize,
    pub groups: Vec<[Vec<f64>; 3]>,
    /// Labels for `groups[1..]`.
    pub labels: Vec<OffsetLabel>,
    pub skipped: Vec<SkippedOffset>,
}

impl OffsetGroup {
    pub fn m(&self) -> usize {
        self.groups.len() - 1
    }

    /// All tokens of the group, triple by triple.
    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.groups.iter().flat_map(|g| g.iter().map(Vec::as_slice))
    }
}

/// Builds the offset group for one instance. `re_embed` maps a raw action
/// vector to its action token.
pub fn build_offset_group(
    tokens: &InteractionTokens,
    a_raw: &[f64],
    point_index: usize,
    cluster: &ActionCluster,
    cfg: &OffsetConfig,
    re_embed: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<OffsetGroup> {
    cfg.validate()?;
    let centroid = cluster.centroid_of(point_index)?;
    let mut group = OffsetGroup {
        instance_index: tokens.instance_index,
        groups: vec![[tokens.e_s.clone(), tokens.e_a.clone(), tokens.e_o.clone()]],
        labels: Vec::new(),
        skipped: Vec::new(),
    };
    let plan = cfg
        .global
        .iter()
        .map(|&l| (OffsetKind::Global, l))
        .chain(cfg.local.iter().map(|&l| (OffsetKind::Local, l)));
    for (kind, lambda) in plan {
        let moved = match kind {
            OffsetKind::Global => global_offset(a_raw, centroid, lambda),
            OffsetKind::Local => local_offset(a_raw, centroid, lambda),
        };
        match moved {
            Ok(v) => {
                let e_a = re_embed(&v)?;
                group.groups.push([tokens.e_s.clone(), e_a, tokens.e_o.clone()]);
                group.labels.push(OffsetLabel { kind, lambda });
            }
            Err(e @ Error::DegenerateDirection(_)) => {
                group.skipped.push(SkippedOffset { kind, lambda, reason: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(group)
}

/// Clusters a scene's raw action embeddings and builds every instance's
/// offset group. `tokens` must be the scene's encoded instances in order.
pub fn scene_offset_groups(
    scene: &PromptScene,
    tokens: &[InteractionTokens],
    encoder: &ExplicitEncoder,
    cfg: &OffsetConfig,
    seed: u64,
) -> Result<(ActionCluster, Vec<OffsetGroup>)> {
    if tokens.len() != scene.instances.len() {
        return Err(Error::argument("one token set per instance is required"));
    }
    let raw: Vec<Vec<f64>> = scene
        .instances
        .iter()
        .map(|inst| encoder.embedder.embed_phrase(&inst.action_phrase))
        .collect::<Result<_>>()?;
    let k = cfg.cluster_count(raw.len());
    let cluster = kmeans(&raw, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let groups = scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            build_offset_group(&tokens[i], &raw[i], i, &cluster, cfg, |v| encoder.encode_action(v, inst))
        })
        .collect::<Result<_>>()?;
    Ok((cluster, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{validate_bbox, HOIInstance};
    use crate::rng::gaussian_vec;
    use proptest::prelude::*;

    fn pts(raw: &[[f64; 2]]) -> Vec<Vec<f64>> {
        raw.iter().map(|p| p.to_vec()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Minimum-SSE 2-partition by trying every 2-colouring.
    fn brute_force_two_means(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut sse = 0.0;
            for g in 0..2 {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, l)| **l == g).map(|(p, _)| p).collect();
                let mean: Vec<f64> = (0..points[0].len())
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                sse += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, labels);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn four_point_example_matches_brute_force() {
        let p = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]]);
        let c = kmeans(&p, 2, 489, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let (sse, labels) = brute_force_two_means(&p);
        assert!(same_partition(&c.assignments, &labels));
        assert!((c.inertia - sse).abs() < 1e-12);
        let mut cents = c.centroids.clone();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(close(&cents[0], &[0.0, 0.5], 1e-12));
        assert!(close(&cents[1], &[10.0, 10.5], 1e-12));
    }

    #[test]
    fn k_equals_n_and_k_one() {
        let p = pts(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
        let c = kmeans(&p, 3, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(c.inertia, 0.0);
        for (i, &a) in c.assignments.iter().enumerate() {
            assert_eq!(c.centroids[a], p[i]);
        }
        let one = kmeans(&p, 1, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!(close(&one.centroids[0], &[1.5, 0.5], 1e-12));
    }

    #[test]
    fn invalid_k_is_argument_error() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&p, 0, 1, 10, 1e-8), Err(Error::Argument(_))));
        assert!(matches!(kmeans(&p, 2, 1, 10, 1e-8), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let p = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let c = kmeans(&p, 2, 3, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(c.inertia, 0.0);
        assert!(c.assignments.iter().all(|&a| a < 2));
    }

    #[test]
    fn planted_partition_recovered_for_fifty_seeds() {
        let mut rng = substream(11, "planted");
        let centres = [[0.0, 0.0, 0.0], [20.0, 0.0, 5.0], [0.0, 25.0, -10.0]];
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (g, c) in centres.iter().enumerate() {
            for _ in 0..8 {
                let noise = gaussian_vec(&mut rng, 3);
                points.push(c.iter().zip(&noise).map(|(c, n)| c + 0.3 * n).collect::<Vec<f64>>());
                truth.push(g);
            }
        }
        for seed in 0..50 {
            let c = kmeans(&points, 3, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
            assert!(same_partition(&c.assignments, &truth), "seed {seed}");
        }
    }

    #[test]
    fn offset_examples() {
        assert_eq!(global_offset(&[1.0, 0.0], &[0.0, 2.0], 0.1).unwrap(), vec![1.0, 0.1]);
        let l = local_offset(&[1.0, 0.0], &[0.0, 2.0], 0.05).unwrap();
        let s5 = 5f64.sqrt();
        assert!(close(&l, &[1.0 - 0.05 / s5, 0.10 / s5], 1e-15));
        assert_eq!(global_offset(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(local_offset(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        let full = local_offset(&[1.0, 2.0], &[4.0, 6.0], 5.0).unwrap();
        assert!(close(&full, &[4.0, 6.0], 1e-12));
        assert!(matches!(global_offset(&[1.0], &[0.0], 0.1), Err(Error::DegenerateDirection(_))));
        assert!(matches!(local_offset(&[1.0], &[1.0], 0.1), Err(Error::DegenerateDirection(_))));
    }

    proptest! {
        #[test]
        fn inertia_never_increases(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..30),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let k = k.min(raw.len());
            let c = kmeans(&raw, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
            for w in c.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
            }
            prop_assert!(c.inertia >= 0.0);
            prop_assert!(c.assignments.iter().all(|&a| a < k));
            if c.iterations < DEFAULT_MAX_ITER {
                for (j, cent) in c.centroids.iter().enumerate() {
                    let members: Vec<&Vec<f64>> =
                        raw.iter().zip(&c.assignments).filter(|(_, a)| **a == j).map(|(p, _)| p).collect();
                    if members.is_empty() {
                        continue;
                    }
                    for d in 0..3 {
                        let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                        prop_assert!((cent[d] - mean).abs() <= 1e-12);
                    }
                }
            }
        }

        #[test]
        fn offsets_move_by_exactly_lambda(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            c in prop::collection::vec(-3.0f64..3.0, 4),
            lambda in -1.0f64..1.0,
        ) {
            prop_assume!(l2_norm(&c) > 1e-3);
            let g = global_offset(&a, &c, lambda).unwrap();
            let dg: Vec<f64> = g.iter().zip(&a).map(|(x, y)| x - y).collect();
            prop_assert!((l2_norm(&dg) - lambda.abs()).abs() <= 1e-12);
            let diff: Vec<f64> = c.iter().zip(&a).map(|(x, y)| x - y).collect();
            prop_assume!(l2_norm(&diff) > 1e-3);
            let l = local_offset(&a, &c, lambda).unwrap();
            let dl: Vec<f64> = l.iter().zip(&a).map(|(x, y)| x - y).collect();
            prop_assert!((l2_norm(&dl) - lambda.abs()).abs() <= 1e-12);
        }
    }

    fn scene() -> PromptScene {
        let inst = |i: usize, s: &str, a: &str, o: &str| HOIInstance {
            subject_phrase: s.into(),
            action_phrase: a.into(),
            object_phrase: o.into(),
            subject_box: validate_bbox([0.1, 0.1, 0.4, 0.8], None).unwrap(),
            object_box: validate_bbox([0.3, 0.4, 0.9, 0.9], None).unwrap(),
            instance_index: i,
        };
        PromptScene {
            prompt: "a person riding a horse and a person holding a cup".into(),
            instances: vec![
                inst(0, "person", "riding", "horse"),
                inst(1, "person", "holding", "cup"),
                inst(2, "person", "kicking", "ball"),
            ],
            seed: 489,
            implicit_triplets: None,
        }
    }

    #[test]
    fn default_group_has_five_triples_sharing_entities() {
        let sc = scene();
        let enc = ExplicitEncoder::seeded(489, 16, 8, 2);
        let toks: Vec<_> = sc.instances.iter().map(|i| enc.encode(i).unwrap()).collect();
        // one cluster keeps every point off its centroid, so no offset is skipped
        let cfg = OffsetConfig { k: Some(1), ..OffsetConfig::default() };
        let (_, groups) = scene_offset_groups(&sc, &toks, &enc, &cfg, 489).unwrap();
        for (g, t) in groups.iter().zip(&toks) {
            assert_eq!(g.groups.len(), 5);
            assert_eq!(g.m(), 4);
            assert_eq!(g.groups[0], [t.e_s.clone(), t.e_a.clone(), t.e_o.clone()]);
            for triple in &g.groups[1..] {
                assert_eq!(triple[0], t.e_s);
                assert_eq!(triple[2], t.e_o);
                assert_ne!(triple[1], t.e_a);
            }
            let kinds: Vec<OffsetKind> = g.labels.iter().map(|l| l.kind).collect();
            assert_eq!(kinds, [OffsetKind::Global, OffsetKind::Global, OffsetKind::Local, OffsetKind::Local]);
        }
    }

    #[test]
    fn singleton_cluster_skips_local_offsets() {
        let mut sc = scene();
        sc.instances.truncate(1);
        let enc = ExplicitEncoder::seeded(489, 16, 8, 2);
        let toks = vec![enc.encode(&sc.instances[0]).unwrap()];
        let (_, groups) = scene_offset_groups(&sc, &toks, &enc, &OffsetConfig::default(), 1).unwrap();
        assert_eq!(groups[0].m(), 2);
        assert_eq!(groups[0].skipped.len(), 2);
        assert!(groups[0].skipped.iter().all(|s| s.kind == OffsetKind::Local));
    }

    #[test]
    fn empty_offset_lists_rejected() {
        let cfg = OffsetConfig { global: vec![], local: vec![], k: None };
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        let cfg = OffsetConfig { global: vec![f64::NAN], ..OffsetConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
