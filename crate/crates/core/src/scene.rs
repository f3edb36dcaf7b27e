//! Relation and attribution probe mining from scene graphs.
//!
//! Objects smaller than a quarter of the image in either dimension are
//! dropped; surviving pairs of differently-categorized objects are rendered
//! through fixed templates into a true caption and a constituent-swapped
//! false caption, cropped to the smallest box holding both objects.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.w)
    }

    pub fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.h)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    /// Intersection with the `width × height` image rectangle.
    pub fn clamp_to(&self, width: u32, height: u32) -> BBox {
        let x = self.x.min(width);
        let y = self.y.min(height);
        let r = self.right().min(u64::from(width)) as u32;
        let b = self.bottom().min(u64::from(height)) as u32;
        BBox::new(x, y, r - x, b - y)
    }
}

/// Coordinate-wise hull of two boxes.
pub fn smallest_enclosing_bbox(a: &BBox, b: &BBox) -> BBox {
    let x = a.x.min(b.x);
    let y = a.y.min(b.y);
    let r = a.right().max(b.right());
    let btm = a.bottom().max(b.bottom());
    BBox::new(x, y, (r - u64::from(x)) as u32, (btm - u64::from(y)) as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub category: String,
    pub bbox: BBox,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub subject_id: String,
    pub object_id: String,
    pub predicate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub relations: Vec<RelationEdge>,
}

impl SceneGraph {
    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::invalid(format!("scene {}: {msg}", self.image_id));
        if self.image_width == 0 || self.image_height == 0 {
            return Err(ctx("image dimensions must be positive".into()));
        }
        let frame = BBox::new(0, 0, self.image_width, self.image_height);
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.object_id.as_str()) {
                return Err(ctx(format!("duplicate object id {}", o.object_id)));
            }
            if o.bbox.w == 0 || o.bbox.h == 0 {
                return Err(ctx(format!("object {} has an empty box", o.object_id)));
            }
            if !frame.contains(&o.bbox) {
                return Err(ctx(format!("object {} lies outside the image", o.object_id)));
            }
        }
        for r in &self.relations {
            if r.subject_id == r.object_id {
                return Err(ctx(format!("self-relation on {}", r.subject_id)));
            }
            for id in [&r.subject_id, &r.object_id] {
                if !ids.contains(id.as_str()) {
                    return Err(ctx(format!("relation references unknown object {id}")));
                }
            }
        }
        Ok(())
    }

    fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Relation,
    Attribution,
    Order,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AroTestCase {
    pub image_id: String,
    pub crop: BBox,
    pub true_caption: String,
    pub false_captions: Vec<String>,
    pub task_kind: TaskKind,
    pub group_key: String,
}

impl AroTestCase {
    /// Id of the cropped region inside image embedding sets:
    /// `"{image_id}@{x},{y},{w},{h}"`.
    pub fn image_key(&self) -> String {
        let c = self.crop;
        format!("{}@{},{},{},{}", self.image_id, c.x, c.y, c.w, c.h)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.true_caption.as_str())
            .chain(self.false_captions.iter().map(String::as_str))
    }
}

/// Objects at least a quarter of the image wide and high.
pub fn filter_candidate_objects(scene: &SceneGraph) -> Vec<&str> {
    scene
        .objects
        .iter()
        .filter(|o| passes_size(scene, o))
        .map(|o| o.object_id.as_str())
        .collect()
}

fn passes_size(scene: &SceneGraph, o: &SceneObject) -> bool {
    // w >= W/4 without rounding W/4.
    4 * u64::from(o.bbox.w) >= u64::from(scene.image_width)
        && 4 * u64::from(o.bbox.h) >= u64::from(scene.image_height)
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn render_relation_captions(subject: &str, predicate: &str, object: &str) -> (String, String) {
    let (s, p, o) = (norm(subject), norm(predicate), norm(object));
    (
        format!("the {s} is {p} the {o}"),
        format!("the {o} is {p} the {s}"),
    )
}

pub fn render_attribution_captions(
    attr1: &str,
    obj1: &str,
    attr2: &str,
    obj2: &str,
) -> Result<(String, String)> {
    let (a1, o1, a2, o2) = (norm(attr1), norm(obj1), norm(attr2), norm(obj2));
    if [&a1, &o1, &a2, &o2].iter().any(|s| s.is_empty()) {
        return Err(Error::invalid("attribution template needs non-empty words"));
    }
    if a1 == a2 {
        return Err(Error::invalid(format!("identical attributes {a1:?}")));
    }
    if o1 == o2 {
        return Err(Error::invalid(format!("identical objects {o1:?}")));
    }
    Ok((
        format!("the {a1} {o1} and the {a2} {o2}"),
        format!("the {a2} {o1} and the {a1} {o2}"),
    ))
}

pub const DEFAULT_SYMMETRIC_PREDICATES: &[&str] = &["near", "next to"];

/// Predicates excluded from relation mining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetricBlocklist(BTreeSet<String>);

impl Default for SymmetricBlocklist {
    fn default() -> Self {
        Self::new(DEFAULT_SYMMETRIC_PREDICATES.iter().copied())
    }
}

impl SymmetricBlocklist {
    pub fn new<'a>(predicates: impl IntoIterator<Item = &'a str>) -> Self {
        Self(predicates.into_iter().map(norm).collect())
    }

    /// Defaults, plus `extra`, plus every predicate listed as its own
    /// inverse in `inverses`.
    pub fn from_config(extra: &[String], inverses: &BTreeMap<String, String>) -> Self {
        let mut set = Self::default();
        set.0.extend(extra.iter().map(|p| norm(p)));
        set.0.extend(
            inverses
                .iter()
                .filter(|(p, inv)| norm(p) == norm(inv))
                .map(|(p, _)| norm(p)),
        );
        set
    }

    pub fn contains(&self, predicate: &str) -> bool {
        self.0.contains(&norm(predicate))
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

pub fn enumerate_relation_cases(scene: &SceneGraph, blocklist: &SymmetricBlocklist) -> Vec<AroTestCase> {
    let passing: HashSet<&str> = filter_candidate_objects(scene).into_iter().collect();
    let mut cases = Vec::new();
    for edge in &scene.relations {
        if blocklist.contains(&edge.predicate)
            || !passing.contains(edge.subject_id.as_str())
            || !passing.contains(edge.object_id.as_str())
        {
            continue;
        }
        let (Some(subj), Some(obj)) = (scene.object(&edge.subject_id), scene.object(&edge.object_id))
        else {
            continue;
        };
        if norm(&subj.category) == norm(&obj.category) {
            continue;
        }
        let (true_caption, false_caption) =
            render_relation_captions(&subj.category, &edge.predicate, &obj.category);
        cases.push(AroTestCase {
            image_id: scene.image_id.clone(),
            crop: crop_for(scene, subj, obj),
            true_caption,
            false_captions: vec![false_caption],
            task_kind: TaskKind::Relation,
            group_key: norm(&edge.predicate),
        });
    }
    sort_cases(&mut cases);
    cases
}

pub fn enumerate_attribution_cases(scene: &SceneGraph) -> Vec<AroTestCase> {
    let passing: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| passes_size(scene, o) && !o.attributes.is_empty())
        .collect();
    let mut seen = HashSet::new();
    let mut cases = Vec::new();
    for (i, first) in passing.iter().enumerate() {
        for second in &passing[i + 1..] {
            if norm(&first.category) == norm(&second.category) {
                continue;
            }
            for a1 in dedup_attrs(first) {
                for a2 in dedup_attrs(second) {
                    if a1 == a2 {
                        continue;
                    }
                    let pair = if a1 < a2 { (&a1, &a2) } else { (&a2, &a1) };
                    let key = (
                        first.object_id.clone(),
                        second.object_id.clone(),
                        pair.0.clone(),
                        pair.1.clone(),
                    );
                    if !seen.insert(key) {
                        continue;
                    }
                    let Ok((true_caption, false_caption)) =
                        render_attribution_captions(&a1, &first.category, &a2, &second.category)
                    else {
                        continue;
                    };
                    cases.push(AroTestCase {
                        image_id: scene.image_id.clone(),
                        crop: crop_for(scene, first, second),
                        true_caption,
                        false_captions: vec![false_caption],
                        task_kind: TaskKind::Attribution,
                        group_key: format!("{}|{}", pair.0, pair.1),
                    });
                }
            }
        }
    }
    sort_cases(&mut cases);
    cases
}

fn dedup_attrs(o: &SceneObject) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for a in &o.attributes {
        let a = norm(a);
        if !a.is_empty() && !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

fn crop_for(scene: &SceneGraph, a: &SceneObject, b: &SceneObject) -> BBox {
    smallest_enclosing_bbox(&a.bbox, &b.bbox).clamp_to(scene.image_width, scene.image_height)
}

/// Stable sort by `(image_id, group_key, crop)`.
pub fn sort_cases(cases: &mut [AroTestCase]) {
    cases.sort_by(|a, b| {
        (&a.image_id, &a.group_key, a.crop).cmp(&(&b.image_id, &b.group_key, b.crop))
    });
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MineOutput {
    pub relation: Vec<AroTestCase>,
    pub attribution: Vec<AroTestCase>,
}

/// Mines every scene (in parallel) and merges in deterministic order.
pub fn mine_scenes(scenes: &[SceneGraph], blocklist: &SymmetricBlocklist) -> Result<MineOutput> {
    use rayon::prelude::*;
    for s in scenes {
        s.validate()?;
    }
    let per_scene: Vec<(Vec<AroTestCase>, Vec<AroTestCase>)> = scenes
        .par_iter()
        .map(|s| (enumerate_relation_cases(s, blocklist), enumerate_attribution_cases(s)))
        .collect();
    let mut out = MineOutput::default();
    for (r, a) in per_scene {
        out.relation.extend(r);
        out.attribution.extend(a);
    }
    sort_cases(&mut out.relation);
    sort_cases(&mut out.attribution);
    Ok(out)
}

pub fn read_scenes(reader: impl BufRead) -> Result<Vec<SceneGraph>> {
    crate::io::read_jsonl(reader)
}

pub fn write_cases(mut writer: impl Write, cases: &[AroTestCase]) -> Result<()> {
    crate::io::write_jsonl(&mut writer, cases)
}

/// Counts of cases per group, used for dataset statistics.
pub fn group_counts(cases: &[AroTestCase]) -> BTreeMap<String, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in cases {
        *counts.entry(&c.group_key).or_default() += 1;
    }
    counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub const SPATIAL_RELATIONS: &[&str] = &[
    "above", "at", "behind", "below", "beneath", "in", "in front of", "inside", "on", "on top of",
    "to the left of", "to the right of", "under",
];

pub const VERB_RELATIONS: &[&str] = &[
    "carrying", "covered by", "covered in", "covered with", "covering", "cutting", "eating",
    "feeding", "grazing on", "hanging on", "holding", "leaning on", "looking at", "lying in",
    "lying on", "parked on", "reflected in", "resting on", "riding", "sitting at", "sitting in",
    "sitting on", "sitting on top of", "standing by", "standing in", "standing on",
    "surrounded by", "using", "walking in", "walking on", "watching", "wearing",
];
