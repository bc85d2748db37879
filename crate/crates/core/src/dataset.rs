//! Scene annotations: prompts, interaction instances with boxes, and the
//! augmented export that adds mined implicit triplets.
//!
//! File layout:
//!
//! ```json
//! {"scenes": [{
//!     "prompt": "a person is riding a horse",
//!     "seed": 489,
//!     "image_width": 128, "image_height": 128,
//!     "instances": [{"subject": "person", "action": "riding", "object": "horse",
//!                    "subject_box": [32, 8, 96, 80], "object_box": [16, 40, 120, 124]}],
//!     "implicit_triplets": [["person", "on top of", "horse"]]
//! }]}
//! ```
//!
//! `seed`, the image dimensions and `implicit_triplets` are optional. When the
//! image dimensions are present, boxes are in pixels and get normalized;
//! otherwise they must already lie in `[0, 1]`. Instances may carry an explicit
//! `"index"`; it defaults to the position in the list.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{json_parse_error, Error, Result};
use crate::implicit_mining::Triplet;
use crate::rng::DEFAULT_SEED;

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        validate_bbox([x0, y0, x1, y1], None)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// Normalizes (when `image_dims = (width, height)` is given) and validates a box.
pub fn validate_bbox(raw: [f64; 4], image_dims: Option<(f64, f64)>) -> Result<BBox> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("box {raw:?} has non-finite coordinates")));
    }
    let [x0, y0, x1, y1] = match image_dims {
        Some((w, h)) => {
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::validation(format!("image dimensions must be positive, got {w}×{h}")));
            }
            [raw[0] / w, raw[1] / h, raw[2] / w, raw[3] / h]
        }
        None => raw,
    };
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    if !(in_unit(x0) && in_unit(y0) && in_unit(x1) && in_unit(y1)) {
        return Err(Error::validation(format!(
            "box {:?} lies outside the unit square after normalization",
            [x0, y0, x1, y1]
        )));
    }
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::validation(format!(
            "box {:?} is degenerate or inverted (need x0 < x1 and y0 < y1)",
            [x0, y0, x1, y1]
        )));
    }
    Ok(BBox { x0, y0, x1, y1 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HOIInstance {
    pub subject_phrase: String,
    pub action_phrase: String,
    pub object_phrase: String,
    pub subject_box: BBox,
    pub object_box: BBox,
    pub instance_index: usize,
}

impl HOIInstance {
    /// Region assigned to the action token: union of the subject and object boxes.
    pub fn action_box(&self) -> BBox {
        self.subject_box.union(&self.object_box)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptScene {
    pub prompt: String,
    pub instances: Vec<HOIInstance>,
    pub seed: u64,
    pub implicit_triplets: Option<Vec<Triplet>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    scenes: Vec<RawScene>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_height: Option<u32>,
    instances: Vec<RawInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    implicit_triplets: Option<Vec<[String; 3]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    subject: String,
    action: String,
    object: String,
    subject_box: [f64; 4],
    object_box: [f64; 4],
}

/// Parses and validates a scene file, preserving scene order.
pub fn parse_scene_file(bytes: &[u8]) -> Result<Vec<PromptScene>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        message: "scene file is not valid UTF-8".into(),
    })?;
    let file: SceneFile = serde_json::from_str(text).map_err(|e| json_parse_error(text, &e))?;
    file.scenes
        .into_iter()
        .enumerate()
        .map(|(i, raw)| convert_scene(i, raw))
        .collect()
}

fn convert_scene(scene_idx: usize, raw: RawScene) -> Result<PromptScene> {
    let ctx = |msg: String| Error::validation(format!("scene {scene_idx}: {msg}"));
    if raw.prompt.trim().is_empty() {
        return Err(ctx("prompt is empty".into()));
    }
    if raw.instances.is_empty() {
        return Err(ctx("scene needs at least one interaction instance".into()));
    }
    let dims = match (raw.image_width, raw.image_height) {
        (Some(w), Some(h)) => Some((w as f64, h as f64)),
        (None, None) => None,
        _ => return Err(ctx("image_width and image_height must be given together".into())),
    };
    let mut seen = BTreeSet::new();
    let mut instances = Vec::with_capacity(raw.instances.len());
    for (pos, inst) in raw.instances.into_iter().enumerate() {
        let index = inst.index.unwrap_or(pos);
        let ictx = |msg: String| ctx(format!("instance {index}: {msg}"));
        if !seen.insert(index) {
            return Err(ictx("duplicate instance index".into()));
        }
        for (field, value) in [("subject", &inst.subject), ("action", &inst.action), ("object", &inst.object)] {
            if value.trim().is_empty() {
                return Err(ictx(format!("{field} phrase is empty")));
            }
        }
        let subject_box = validate_bbox(inst.subject_box, dims).map_err(|e| ictx(format!("subject_box: {}", strip(&e))))?;
        let object_box = validate_bbox(inst.object_box, dims).map_err(|e| ictx(format!("object_box: {}", strip(&e))))?;
        instances.push(HOIInstance {
            subject_phrase: inst.subject,
            action_phrase: inst.action,
            object_phrase: inst.object,
            subject_box,
            object_box,
            instance_index: index,
        });
    }
    let implicit_triplets = raw
        .implicit_triplets
        .map(|list| {
            list.into_iter()
                .map(|[h, r, t]| Triplet::new(&h, &r, &t))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()
        .map_err(|e| ctx(format!("implicit_triplets: {}", strip(&e))))?;
    Ok(PromptScene {
        prompt: raw.prompt,
        instances,
        seed: raw.seed.unwrap_or(DEFAULT_SEED),
        implicit_triplets,
    })
}

fn strip(e: &Error) -> String {
    match e {
        Error::Validation(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Serializes scenes with their mined triplets; every scene must have them.
pub fn export_augmented(scenes: &[PromptScene]) -> Result<String> {
    let mut raw_scenes = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let triplets = scene.implicit_triplets.as_ref().ok_or_else(|| {
            Error::State(format!("scene {i} has no implicit_triplets; run mining first"))
        })?;
        raw_scenes.push(to_raw(scene, Some(triplets)));
    }
    let mut text = serde_json::to_string_pretty(&SceneFile { scenes: raw_scenes })
        .map_err(|e| Error::State(format!("serializing scenes: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Serializes scenes as-is (implicit triplets written only when present).
pub fn export_scenes(scenes: &[PromptScene]) -> Result<String> {
    let raw_scenes = scenes.iter().map(|s| to_raw(s, s.implicit_triplets.as_ref())).collect();
    let mut text = serde_json::to_string_pretty(&SceneFile { scenes: raw_scenes })
        .map_err(|e| Error::State(format!("serializing scenes: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn to_raw(scene: &PromptScene, triplets: Option<&Vec<Triplet>>) -> RawScene {
    RawScene {
        prompt: scene.prompt.clone(),
        seed: Some(scene.seed),
        image_width: None,
        image_height: None,
        instances: scene
            .instances
            .iter()
            .enumerate()
            .map(|(pos, inst)| RawInstance {
                index: (inst.instance_index != pos).then_some(inst.instance_index),
                subject: inst.subject_phrase.clone(),
                action: inst.action_phrase.clone(),
                object: inst.object_phrase.clone(),
                subject_box: inst.subject_box.coords(),
                object_box: inst.object_box.coords(),
            })
            .collect(),
        implicit_triplets: triplets
            .map(|ts| ts.iter().map(|t| [t.h.clone(), t.r.clone(), t.t.clone()]).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"scenes":[{"prompt":"a person is riding a horse","instances":[
        {"subject":"person","action":"riding","object":"horse",
         "subject_box":[0.1,0.1,0.5,0.5],"object_box":[0.2,0.3,0.9,0.95]}]}]}"#;

    #[test]
    fn minimal_file() {
        let scenes = parse_scene_file(MINIMAL.as_bytes()).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].seed, 489);
        assert_eq!(scenes[0].instances[0].instance_index, 0);
        assert!(scenes[0].implicit_triplets.is_none());
    }

    #[test]
    fn pixel_boxes_are_normalized() {
        let text = r#"{"scenes":[{"prompt":"p","image_width":128,"image_height":128,"instances":[
            {"subject":"a","action":"b","object":"c","subject_box":[32,32,64,64],"object_box":[0,0,128,128]}]}]}"#;
        let scenes = parse_scene_file(text.as_bytes()).unwrap();
        // 32/128 = 0.25, 64/128 = 0.5
        assert_eq!(scenes[0].instances[0].subject_box.coords(), [0.25, 0.25, 0.5, 0.5]);
        assert_eq!(scenes[0].instances[0].object_box.coords(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn degenerate_box_names_scene_and_instance() {
        let text = r#"{"scenes":[{"prompt":"ok","instances":[{"subject":"a","action":"b","object":"c","subject_box":[0.1,0.1,0.5,0.5],"object_box":[0.1,0.1,0.5,0.5]}]},
            {"prompt":"p","instances":[{"subject":"a","action":"b","object":"c","subject_box":[0.3,0.1,0.3,0.5],"object_box":[0.1,0.1,0.5,0.5]}]}]}"#;
        let err = parse_scene_file(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("scene 1") && msg.contains("instance 0") && msg.contains("subject_box"), "{msg}");
    }

    #[test]
    fn validate_bbox_examples() {
        assert_eq!(validate_bbox([0.1, 0.1, 0.5, 0.5], None).unwrap().coords(), [0.1, 0.1, 0.5, 0.5]);
        let b = validate_bbox([10.0, 20.0, 110.0, 220.0], Some((200.0, 400.0))).unwrap();
        // 10/200, 20/400, 110/200, 220/400
        assert_eq!(b.coords(), [0.05, 0.05, 0.55, 0.55]);
        assert!(validate_bbox([0.5, 0.5, 0.2, 0.2], None).is_err());
        assert!(validate_bbox([0.5, 0.5, 1.2, 0.9], None).is_err());
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = r#"{"scenes": [ {"prompt": "x", }]}"#;
        match parse_scene_file(text.as_bytes()).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset > 10 && offset <= text.len()),
            other => panic!("{other:?}"),
        }
        match parse_scene_file(&[b'{', 0xff, b'}']).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let dup = r#"{"scenes":[{"prompt":"p","instances":[
            {"index":3,"subject":"a","action":"b","object":"c","subject_box":[0,0,1,1],"object_box":[0,0,1,1]},
            {"index":3,"subject":"a","action":"b","object":"c","subject_box":[0,0,1,1],"object_box":[0,0,1,1]}]}]}"#;
        assert!(parse_scene_file(dup.as_bytes()).unwrap_err().to_string().contains("duplicate"));
        let empty = r#"{"scenes":[{"prompt":"p","instances":[]}]}"#;
        assert!(parse_scene_file(empty.as_bytes()).is_err());
        let unknown = r#"{"scenes":[{"prompt":"p","colour":1,"instances":[]}]}"#;
        assert!(matches!(parse_scene_file(unknown.as_bytes()), Err(Error::Parse { .. })));
        let half_dims = r#"{"scenes":[{"prompt":"p","image_width":4,"instances":[
            {"subject":"a","action":"b","object":"c","subject_box":[0,0,1,1],"object_box":[0,0,1,1]}]}]}"#;
        assert!(parse_scene_file(half_dims.as_bytes()).is_err());
    }

    fn with_triplets(mut scenes: Vec<PromptScene>, t: Vec<Triplet>) -> Vec<PromptScene> {
        for s in &mut scenes {
            s.implicit_triplets = Some(t.clone());
        }
        scenes
    }

    #[test]
    fn export_round_trips() {
        let scenes = with_triplets(
            parse_scene_file(MINIMAL.as_bytes()).unwrap(),
            vec![Triplet::new("person", "near", "cake").unwrap()],
        );
        let doc = export_augmented(&scenes).unwrap();
        assert!(doc.contains(r#""near""#));
        assert_eq!(parse_scene_file(doc.as_bytes()).unwrap(), scenes);

        let empty = with_triplets(parse_scene_file(MINIMAL.as_bytes()).unwrap(), vec![]);
        let doc = export_augmented(&empty).unwrap();
        assert!(doc.contains(r#""implicit_triplets": []"#));
        assert_eq!(parse_scene_file(doc.as_bytes()).unwrap(), empty);
    }

    #[test]
    fn export_requires_triplets_and_keeps_order() {
        let mut scenes = parse_scene_file(MINIMAL.as_bytes()).unwrap();
        assert!(matches!(export_augmented(&scenes), Err(Error::State(_))));
        let mut second = scenes[0].clone();
        second.prompt = "second".into();
        scenes.push(second);
        let scenes = with_triplets(scenes, vec![]);
        let back = parse_scene_file(export_augmented(&scenes).unwrap().as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].prompt, "second");
    }

    fn arb_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0f64..0.99, 0.0f64..0.99, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(x0, y0, fx, fy)| {
            [x0, y0, x0 + (1.0 - x0) * fx, y0 + (1.0 - y0) * fy]
        })
    }

    proptest! {
        #[test]
        fn parsed_boxes_satisfy_invariants(raw in prop::array::uniform4(-0.5f64..1.5)) {
            match validate_bbox(raw, None) {
                Ok(b) => {
                    prop_assert!(0.0 <= b.x0 && b.x0 < b.x1 && b.x1 <= 1.0);
                    prop_assert!(0.0 <= b.y0 && b.y0 < b.y1 && b.y1 <= 1.0);
                }
                Err(_) => {
                    let ok = raw.iter().all(|v| (0.0..=1.0).contains(v)) && raw[0] < raw[2] && raw[1] < raw[3];
                    prop_assert!(!ok);
                }
            }
        }

        #[test]
        fn parse_export_identity(
            boxes in prop::collection::vec((arb_box(), arb_box()), 1..4),
            seed in any::<u64>(),
            prompt in "[a-z]{1,8}( [a-z]{1,8}){0,4}",
        ) {
            let instances = boxes.iter().enumerate().map(|(i, (s, o))| HOIInstance {
                subject_phrase: format!("subject {i}"),
                action_phrase: "holding".into(),
                object_phrase: "cup".into(),
                subject_box: validate_bbox(*s, None).unwrap(),
                object_box: validate_bbox(*o, None).unwrap(),
                instance_index: i,
            }).collect();
            let scenes = vec![PromptScene {
                prompt,
                instances,
                seed,
                implicit_triplets: Some(vec![Triplet::new("a", "b", "c").unwrap()]),
            }];
            let doc = export_augmented(&scenes).unwrap();
            prop_assert_eq!(parse_scene_file(doc.as_bytes()).unwrap(), scenes);
        }
    }
}
