//! Synthetic Earth-observation scenes with exact multi-granularity ground truth.
//!
//! A scene is a small class-id grid populated with rectilinear objects. Objects
//! never touch (a one-cell gap is enforced), so every class mask decomposes
//! into exactly the objects that produced it and every annotation can be
//! recovered from the raster alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vagueeo::TaskKind;

pub const DEFAULT_CLASSES: [&str; 10] = [
    "plane", "ship", "building", "road", "field", "forest", "water", "vehicle", "tank", "court",
];

/// Rejection-sampling budget for placing a single object.
pub const PLACEMENT_RETRIES: usize = 1000;

pub const SIZE_WORDS: [&str; 2] = ["small", "large"];
pub const POSITION_WORDS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("task {task} is incompatible with scene {scene}: {reason}")]
    Incompatible {
        task: TaskKind,
        scene: String,
        reason: String,
    },
    #[error("malformed scene data: {0}")]
    Malformed(String),
}

/// Axis-aligned box over cells, half-open: covers `x1..x2` by `y1..y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct CellBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl From<[u32; 4]> for CellBox {
    fn from(v: [u32; 4]) -> Self {
        CellBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<CellBox> for [u32; 4] {
    fn from(b: CellBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl CellBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        CellBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn intersects(&self, other: &CellBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }

    /// The box grown by `margin` cells on every side (saturating at zero).
    pub fn expanded(&self, margin: u32) -> CellBox {
        CellBox {
            x1: self.x1.saturating_sub(margin),
            y1: self.y1.saturating_sub(margin),
            x2: self.x2 + margin,
            y2: self.y2 + margin,
        }
    }

    pub fn as_f64(&self) -> [f64; 4] {
        [self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64]
    }

    /// Tight bounding box of a set of cell indices on a grid of the given width.
    pub fn of_cells(cells: &[u32], width: u32) -> Option<CellBox> {
        let mut it = cells.iter();
        let first = *it.next()?;
        let (mut x1, mut y1) = (first % width, first / width);
        let (mut x2, mut y2) = (x1 + 1, y1 + 1);
        for &c in it {
            let (x, y) = (c % width, c / width);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
        Some(CellBox { x1, y1, x2, y2 })
    }
}

/// Row-major class-id grid; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RasterWire", into = "RasterWire")]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub cells: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterWire {
    width: u32,
    height: u32,
    /// (class_id, run_length) in row-major order.
    runs: Vec<(u8, u32)>,
}

impl From<Raster> for RasterWire {
    fn from(r: Raster) -> Self {
        let mut runs: Vec<(u8, u32)> = Vec::new();
        for &c in &r.cells {
            match runs.last_mut() {
                Some((class, len)) if *class == c => *len += 1,
                _ => runs.push((c, 1)),
            }
        }
        RasterWire { width: r.width, height: r.height, runs }
    }
}

impl TryFrom<RasterWire> for Raster {
    type Error = SceneError;

    fn try_from(w: RasterWire) -> Result<Self, Self::Error> {
        let expected = w.width as usize * w.height as usize;
        let mut cells = Vec::with_capacity(expected);
        for (class, len) in w.runs {
            if len == 0 {
                return Err(SceneError::Malformed("zero-length raster run".into()));
            }
            cells.extend(std::iter::repeat_n(class, len as usize));
        }
        if cells.len() != expected {
            return Err(SceneError::Malformed(format!(
                "raster runs cover {} cells, expected {expected}",
                cells.len()
            )));
        }
        Ok(Raster { width: w.width, height: w.height, cells })
    }
}

impl Raster {
    pub fn blank(width: u32, height: u32) -> Self {
        Raster { width, height, cells: vec![0; width as usize * height as usize] }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.cells[(y * self.width + x) as usize]
    }

    /// Sorted indices of cells carrying `class_id`.
    pub fn class_cells(&self, class_id: u8) -> Vec<u32> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class_id)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class_id: u8,
    pub bbox: CellBox,
    /// Sorted cell indices.
    #[serde(with = "cell_runs")]
    pub mask: Vec<u32>,
    /// Size word followed by position word.
    pub attributes: Vec<String>,
}

impl SceneObject {
    pub fn area(&self) -> usize {
        self.mask.len()
    }

    pub fn size_word(&self) -> &str {
        &self.attributes[0]
    }

    pub fn position_word(&self) -> &str {
        &self.attributes[1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: String,
    pub raster_t0: Raster,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raster_t1: Option<Raster>,
    pub objects_t0: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects_t1: Option<Vec<SceneObject>>,
    pub class_table: BTreeMap<u8, String>,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    pub min_objects: u32,
    pub max_objects: u32,
    pub min_side: u32,
    pub max_side: u32,
    /// Produce a second epoch (change-detection scenes).
    pub bitemporal: bool,
    /// Probability that an object loses a corner, making it an L-shaped union.
    pub notch_probability: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 32,
            height: 32,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            min_objects: 3,
            max_objects: 7,
            min_side: 2,
            max_side: 7,
            bitemporal: false,
            notch_probability: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let err = |m: String| Err(SceneError::Config(m));
        if self.classes.is_empty() {
            return err("class table is empty".into());
        }
        if self.classes.len() > 254 {
            return err("at most 254 classes are supported".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if c.is_empty() || !c.chars().all(|ch| ch.is_ascii_lowercase()) {
                return err(format!("class name {c:?} must be a single lowercase word"));
            }
            if c == "background" {
                return err("\"background\" is reserved".into());
            }
            if !seen.insert(c) {
                return err(format!("duplicate class name {c:?}"));
            }
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if !(8..=512).contains(&v) {
                return err(format!("{name} {v} outside [8, 512]"));
            }
        }
        if self.max_objects == 0 {
            return err("max_objects must be at least 1".into());
        }
        if self.min_objects > self.max_objects {
            return err("min_objects exceeds max_objects".into());
        }
        if self.bitemporal && self.min_objects == 0 {
            return err("bi-temporal scenes need at least one object".into());
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return err("object side bounds must satisfy 1 <= min_side <= max_side".into());
        }
        if self.max_side + 2 > self.width.min(self.height) {
            return err("max_side does not fit inside the grid".into());
        }
        if !(0.0..=1.0).contains(&self.notch_probability) {
            return err("notch_probability must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn class_table(&self) -> BTreeMap<u8, String> {
        self.classes.iter().enumerate().map(|(i, c)| ((i + 1) as u8, c.clone())).collect()
    }

    fn fingerprint(&self) -> u32 {
        let text = serde_json::to_string(self).expect("config serializes");
        fnv1a(text.as_bytes()) as u32
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Scene-type word reported for scenes dominated by `class`.
pub fn scene_type(class: &str) -> String {
    match class {
        "plane" => "airport".into(),
        "ship" => "harbor".into(),
        "building" => "residential".into(),
        "road" => "highway".into(),
        "field" => "farmland".into(),
        "forest" => "woodland".into(),
        "water" => "lake".into(),
        "vehicle" => "parking".into(),
        "tank" => "industrial".into(),
        "court" => "stadium".into(),
        other => format!("{other}site"),
    }
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_ids: Vec<u8> = (1..=config.classes.len() as u8).collect();
    let n = rng.gen_range(config.min_objects..=config.max_objects);

    let mut objects = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let obj = place_object(&mut rng, config, &class_ids, &objects).ok_or_else(|| {
            SceneError::Config(format!(
                "could not place object {} without overlap after {PLACEMENT_RETRIES} attempts",
                objects.len() + 1
            ))
        })?;
        objects.push(obj);
    }

    let (raster_t1, objects_t1) = if config.bitemporal {
        let mut later = objects.clone();
        let removed = rng.gen_range(0..later.len());
        later.remove(removed);
        if let Some(added) = place_object(&mut rng, config, &class_ids, &later) {
            later.push(added);
        }
        (Some(rasterize(&later, config.width, config.height)), Some(later))
    } else {
        (None, None)
    };

    Ok(Scene {
        id: format!("s{seed:016x}-{:08x}", config.fingerprint()),
        raster_t0: rasterize(&objects, config.width, config.height),
        raster_t1,
        objects_t0: objects,
        objects_t1,
        class_table: config.class_table(),
        rng_seed: seed,
    })
}

fn place_object(
    rng: &mut ChaCha8Rng,
    config: &SceneConfig,
    class_ids: &[u8],
    existing: &[SceneObject],
) -> Option<SceneObject> {
    for _ in 0..PLACEMENT_RETRIES {
        let class_id = *class_ids.choose(rng).expect("non-empty class table");
        let w = rng.gen_range(config.min_side..=config.max_side);
        let h = rng.gen_range(config.min_side..=config.max_side);
        let x1 = rng.gen_range(0..=config.width - w);
        let y1 = rng.gen_range(0..=config.height - h);
        let bbox = CellBox::new(x1, y1, x1 + w, y1 + h);
        let notch = if w >= 2 && h >= 2 && rng.gen_bool(config.notch_probability) {
            let corner = rng.gen_range(0..4u8);
            Some((corner, rng.gen_range(1..=w / 2), rng.gen_range(1..=h / 2)))
        } else {
            None
        };
        // one-cell gap keeps objects in distinct 8-connected components
        let halo = bbox.expanded(1);
        if existing.iter().any(|o| o.bbox.intersects(&halo)) {
            continue;
        }
        let mut mask = Vec::with_capacity(bbox.area() as usize);
        for y in bbox.y1..bbox.y2 {
            for x in bbox.x1..bbox.x2 {
                if let Some((corner, nx, ny)) = notch {
                    let in_x = if corner % 2 == 0 { x < bbox.x1 + nx } else { x >= bbox.x2 - nx };
                    let in_y = if corner < 2 { y < bbox.y1 + ny } else { y >= bbox.y2 - ny };
                    if in_x && in_y {
                        continue;
                    }
                }
                mask.push(y * config.width + x);
            }
        }
        let attributes = object_attributes(&bbox, mask.len(), config);
        return Some(SceneObject { class_id, bbox, mask, attributes });
    }
    None
}

fn object_attributes(bbox: &CellBox, area: usize, config: &SceneConfig) -> Vec<String> {
    let mid_side = f64::from(config.min_side + config.max_side) / 2.0;
    let size = if area as f64 >= mid_side * mid_side { "large" } else { "small" };
    let horizontal = if bbox.x1 + bbox.x2 < config.width { "left" } else { "right" };
    let vertical = if bbox.y1 + bbox.y2 < config.height { "top" } else { "bottom" };
    vec![size.to_string(), format!("{vertical}-{horizontal}")]
}

pub fn rasterize(objects: &[SceneObject], width: u32, height: u32) -> Raster {
    let mut raster = Raster::blank(width, height);
    for o in objects {
        for &c in &o.mask {
            raster.cells[c as usize] = o.class_id;
        }
    }
    raster
}

/// What an annotation is about: a class, or one specific object of epoch t0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Class(u8),
    Object(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Annotation {
    Label {
        label: String,
    },
    LabelSet {
        labels: Vec<String>,
    },
    Count {
        count: u32,
    },
    Box {
        bbox: CellBox,
    },
    BoxSet {
        boxes: Vec<CellBox>,
    },
    Mask {
        class_id: u8,
        #[serde(with = "cell_runs")]
        cells: Vec<u32>,
    },
    ClassMasks {
        masks: BTreeMap<u8, CellRuns>,
    },
    /// Changed cells, split by the epoch in which they are occupied.
    MaskPair {
        #[serde(with = "cell_runs")]
        before: Vec<u32>,
        #[serde(with = "cell_runs")]
        after: Vec<u32>,
    },
    Contours {
        loops: Vec<Vec<[u32; 2]>>,
    },
}

/// Sorted cell-index list that serializes as `[start, length]` runs.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellRuns(#[serde(with = "cell_runs")] pub Vec<u32>);

impl Annotation {
    pub fn granularity(&self) -> &'static str {
        match self {
            Annotation::Label { .. } => "label",
            Annotation::LabelSet { .. } => "label-set",
            Annotation::Count { .. } => "count",
            Annotation::Box { .. } => "box",
            Annotation::BoxSet { .. } => "box-set",
            Annotation::Mask { .. } | Annotation::ClassMasks { .. } => "mask",
            Annotation::MaskPair { .. } => "mask-pair",
            Annotation::Contours { .. } => "contours",
        }
    }
}

impl Scene {
    pub fn width(&self) -> u32 {
        self.raster_t0.width
    }

    pub fn height(&self) -> u32 {
        self.raster_t0.height
    }

    pub fn class_name(&self, id: u8) -> Option<&str> {
        self.class_table.get(&id).map(String::as_str)
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.class_table.iter().find(|(_, n)| n.as_str() == name).map(|(&id, _)| id)
    }

    pub fn objects_of(&self, class_id: u8) -> impl Iterator<Item = &SceneObject> {
        self.objects_t0.iter().filter(move |o| o.class_id == class_id)
    }

    pub fn count_of(&self, class_id: u8) -> u32 {
        self.objects_of(class_id).count() as u32
    }

    /// Class with the largest covered area; ties go to the lower id.
    pub fn dominant_class(&self) -> Option<u8> {
        let mut area: BTreeMap<u8, usize> = BTreeMap::new();
        for o in &self.objects_t0 {
            *area.entry(o.class_id).or_default() += o.area();
        }
        area.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(c, _)| c)
    }

    /// Largest object of a class, if it is strictly larger than the rest.
    pub fn largest_of(&self, class_id: u8) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        let mut tied = false;
        for (i, o) in self.objects_t0.iter().enumerate() {
            if o.class_id != class_id {
                continue;
            }
            match best {
                Some((_, a)) if o.area() == a => tied = true,
                Some((_, a)) if o.area() < a => {}
                _ => {
                    best = Some((i, o.area()));
                    tied = false;
                }
            }
        }
        if tied {
            None
        } else {
            best.map(|(i, _)| i)
        }
    }

    /// Objects matching a class and every given attribute word.
    pub fn matching_objects(&self, class_id: u8, attributes: &[String]) -> Vec<usize> {
        self.objects_t0
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                o.class_id == class_id && attributes.iter().all(|a| o.attributes.contains(a))
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Cells whose class differs between the two epochs.
    pub fn change_cells(&self) -> Option<(Vec<u32>, Vec<u32>)> {
        let t1 = self.raster_t1.as_ref()?;
        let mut before = Vec::new();
        let mut after = Vec::new();
        for (i, (&a, &b)) in self.raster_t0.cells.iter().zip(&t1.cells).enumerate() {
            if a != b {
                if a != 0 {
                    before.push(i as u32);
                }
                if b != 0 {
                    after.push(i as u32);
                }
            }
        }
        Some((before, after))
    }

    pub fn check_invariants(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Malformed(format!("scene {}: {m}", self.id)));
        let (w, h) = (self.width(), self.height());
        if self.raster_t0.cells.len() != (w * h) as usize {
            return bad("raster size mismatch".into());
        }
        for &c in &self.raster_t0.cells {
            if c != 0 && !self.class_table.contains_key(&c) {
                return bad(format!("class id {c} missing from class table"));
            }
        }
        for o in self.objects_t0.iter().chain(self.objects_t1.iter().flatten()) {
            if o.mask.is_empty() {
                return bad("empty object mask".into());
            }
            if CellBox::of_cells(&o.mask, w) != Some(o.bbox) {
                return bad("object bbox is not the tight box of its mask".into());
            }
        }
        if rasterize(&self.objects_t0, w, h) != self.raster_t0 {
            return bad("raster_t0 does not match its objects".into());
        }
        match (&self.raster_t1, &self.objects_t1) {
            (Some(r), Some(objs)) => {
                if &rasterize(objs, w, h) != r {
                    return bad("raster_t1 does not match its objects".into());
                }
            }
            (None, None) => {}
            _ => return bad("raster_t1 and objects_t1 must be present together".into()),
        }
        Ok(())
    }
}

pub fn derive_annotation(
    scene: &Scene,
    task: TaskKind,
    target: Option<Target>,
) -> Result<Annotation, SceneError> {
    let incompatible = |reason: &str| SceneError::Incompatible {
        task,
        scene: scene.id.clone(),
        reason: reason.to_string(),
    };
    let class_target = || match target {
        Some(Target::Class(c)) if scene.class_table.contains_key(&c) => Ok(c),
        Some(Target::Class(c)) => Err(incompatible(&format!("unknown class id {c}"))),
        _ => Err(incompatible("a target class is required")),
    };
    let present = |c: u8| {
        if scene.count_of(c) == 0 {
            Err(incompatible("target class does not occur in the scene"))
        } else {
            Ok(c)
        }
    };

    match task {
        TaskKind::SceneCls => {
            let c = scene.dominant_class().ok_or_else(|| incompatible("scene has no objects"))?;
            Ok(Annotation::Label { label: scene_type(scene.class_name(c).unwrap_or_default()) })
        }
        TaskKind::MultiLabelCls => {
            let labels: BTreeSet<&str> =
                scene.objects_t0.iter().filter_map(|o| scene.class_name(o.class_id)).collect();
            if labels.is_empty() {
                return Err(incompatible("scene has no objects"));
            }
            Ok(Annotation::LabelSet { labels: labels.into_iter().map(String::from).collect() })
        }
        TaskKind::Counting => Ok(Annotation::Count { count: scene.count_of(class_target()?) }),
        TaskKind::VisualGrounding | TaskKind::Detection => {
            let c = present(class_target()?)?;
            let mut boxes: Vec<CellBox> = scene.objects_of(c).map(|o| o.bbox).collect();
            boxes.sort();
            Ok(Annotation::BoxSet { boxes })
        }
        TaskKind::RegionReasoning => {
            let c = present(class_target()?)?;
            let i = scene
                .largest_of(c)
                .ok_or_else(|| incompatible("largest object of the class is not unique"))?;
            Ok(Annotation::Box { bbox: scene.objects_t0[i].bbox })
        }
        TaskKind::SemanticSeg => match target {
            None => {
                let mut masks: BTreeMap<u8, CellRuns> =
                    scene.class_table.keys().map(|&c| (c, CellRuns::default())).collect();
                for (i, &c) in scene.raster_t0.cells.iter().enumerate() {
                    if c != 0 {
                        masks.entry(c).or_default().0.push(i as u32);
                    }
                }
                Ok(Annotation::ClassMasks { masks })
            }
            Some(_) => {
                let c = class_target()?;
                Ok(Annotation::Mask { class_id: c, cells: scene.raster_t0.class_cells(c) })
            }
        },
        TaskKind::ReferringSeg => match target {
            Some(Target::Object(i)) => {
                let o = scene.objects_t0.get(i).ok_or_else(|| incompatible("no such object"))?;
                Ok(Annotation::Mask { class_id: o.class_id, cells: o.mask.clone() })
            }
            _ => Err(incompatible("an object reference is required")),
        },
        TaskKind::ChangeDetection => {
            let (before, after) =
                scene.change_cells().ok_or_else(|| incompatible("scene has no second epoch"))?;
            Ok(Annotation::MaskPair { before, after })
        }
        TaskKind::ContourExtraction => {
            let c = present(class_target()?)?;
            let cells = scene.raster_t0.class_cells(c);
            Ok(Annotation::Contours { loops: trace_loops(&cells, scene.width()) })
        }
    }
}

/// Closed outlines (lattice vertices, corners only) of a cell set.
///
/// Each loop walks cell edges clockwise on screen (y pointing down), starts at
/// its smallest `(y, x)` vertex, and loops are returned in sorted order.
pub fn trace_loops(cells: &[u32], width: u32) -> Vec<Vec<[u32; 2]>> {
    type Point = (i64, i64);
    let inside: BTreeSet<(i64, i64)> =
        cells.iter().map(|&c| (i64::from(c % width), i64::from(c / width))).collect();
    // directed boundary edge: start vertex -> (end vertex, owning cell)
    let mut out: HashMap<Point, Vec<(Point, Point)>> = HashMap::new();
    let mut edge_count = 0usize;
    for &(x, y) in &inside {
        let sides = [
            ((x, y - 1), (x, y), (x + 1, y)),
            ((x + 1, y), (x + 1, y), (x + 1, y + 1)),
            ((x, y + 1), (x + 1, y + 1), (x, y + 1)),
            ((x - 1, y), (x, y + 1), (x, y)),
        ];
        for (neighbour, from, to) in sides {
            if !inside.contains(&neighbour) {
                out.entry(from).or_default().push((to, (x, y)));
                edge_count += 1;
            }
        }
    }

    let mut loops = Vec::new();
    let mut used = 0usize;
    while used < edge_count {
        let start = *out
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, _)| k)
            .min_by_key(|&&(x, y)| (y, x))
            .expect("unused edges remain");
        let mut path = vec![start];
        let mut at = start;
        let mut owner: Option<(i64, i64)> = None;
        loop {
            let edges = out.get_mut(&at).expect("boundary is closed");
            // at pinch vertices stay on the same cell to keep 4-connected pieces apart
            let pick = owner
                .and_then(|o| edges.iter().position(|&(_, cell)| cell == o))
                .unwrap_or(0);
            let (next, cell) = edges.swap_remove(pick);
            used += 1;
            owner = Some(cell);
            at = next;
            if at == start {
                break;
            }
            path.push(at);
        }
        loops.push(compress_collinear(path));
    }
    loops.sort();
    loops
}

fn compress_collinear(path: Vec<(i64, i64)>) -> Vec<[u32; 2]> {
    let n = path.len();
    let mut corners = Vec::new();
    for i in 0..n {
        let prev = path[(i + n - 1) % n];
        let cur = path[i];
        let next = path[(i + 1) % n];
        let d1 = (cur.0 - prev.0, cur.1 - prev.1);
        let d2 = (next.0 - cur.0, next.1 - cur.1);
        if d1 != d2 {
            corners.push(cur);
        }
    }
    let start = corners
        .iter()
        .enumerate()
        .min_by_key(|(_, &(x, y))| (y, x))
        .map(|(i, _)| i)
        .unwrap_or(0);
    corners.rotate_left(start);
    corners.into_iter().map(|(x, y)| [x as u32, y as u32]).collect()
}

/// Cells whose centres fall inside the loops (even-odd rule), sorted.
pub fn fill_loops(loops: &[Vec<[u32; 2]>], width: u32, height: u32) -> Vec<u32> {
    let mut verticals: Vec<(u32, u32, u32)> = Vec::new();
    for lp in loops {
        for (i, a) in lp.iter().enumerate() {
            let b = lp[(i + 1) % lp.len()];
            if a[0] == b[0] && a[1] != b[1] {
                verticals.push((a[0], a[1].min(b[1]), a[1].max(b[1])));
            }
        }
    }
    let mut cells = Vec::new();
    for y in 0..height {
        let mut xs: Vec<u32> = verticals
            .iter()
            .filter(|&&(_, lo, hi)| lo <= y && y < hi)
            .map(|&(x, _, _)| x)
            .collect();
        xs.sort_unstable();
        for pair in xs.chunks(2) {
            if let [a, b] = *pair {
                for x in a..b.min(width) {
                    cells.push(y * width + x);
                }
            }
        }
    }
    cells
}

/// Serde adapter storing a sorted `Vec<u32>` as `[start, length]` runs.
pub mod cell_runs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(cells: &[u32], s: S) -> Result<S::Ok, S::Error> {
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for &c in cells {
            match runs.last_mut() {
                Some((start, len)) if *start + *len == c => *len += 1,
                _ => runs.push((c, 1)),
            }
        }
        runs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
        let runs: Vec<(u32, u32)> = Vec::deserialize(d)?;
        let mut cells = Vec::new();
        for (start, len) in runs {
            if len == 0 || cells.last().is_some_and(|&l: &u32| l >= start) {
                return Err(serde::de::Error::custom("cell runs must be non-empty and ascending"));
            }
            cells.extend(start..start + len);
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_class_config() -> SceneConfig {
        SceneConfig {
            width: 64,
            height: 64,
            classes: vec!["plane".into(), "ship".into(), "tank".into()],
            min_objects: 5,
            max_objects: 5,
            min_side: 3,
            max_side: 9,
            bitemporal: false,
            notch_probability: 0.3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(a.raster_t0.cells, b.raster_t0.cells);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_max_objects_is_a_config_error() {
        let cfg = SceneConfig { min_objects: 0, max_objects: 0, ..SceneConfig::default() };
        assert!(matches!(generate_scene(1, &cfg), Err(SceneError::Config(_))));
    }

    #[test]
    fn empty_class_table_and_tiny_grid_are_rejected() {
        let cfg = SceneConfig { classes: vec![], ..SceneConfig::default() };
        assert!(matches!(generate_scene(1, &cfg), Err(SceneError::Config(_))));
        let cfg = SceneConfig { width: 0, ..SceneConfig::default() };
        assert!(matches!(generate_scene(1, &cfg), Err(SceneError::Config(_))));
    }

    #[test]
    fn crowded_config_hits_retry_cap() {
        let cfg = SceneConfig {
            width: 8,
            height: 8,
            min_objects: 40,
            max_objects: 40,
            min_side: 2,
            max_side: 4,
            ..SceneConfig::default()
        };
        let err = generate_scene(3, &cfg).unwrap_err();
        assert!(err.to_string().contains("1000 attempts"), "{err}");
    }

    #[test]
    fn masks_are_pairwise_disjoint() {
        let scene = generate_scene(1, &three_class_config()).unwrap();
        assert_eq!(scene.objects_t0.len(), 5);
        for (i, a) in scene.objects_t0.iter().enumerate() {
            for b in &scene.objects_t0[i + 1..] {
                for ca in &a.mask {
                    assert!(!b.mask.contains(ca), "cell {ca} shared between objects");
                }
            }
        }
    }

    #[test]
    fn invariants_hold_and_bbox_is_tight() {
        for seed in 0..50 {
            let cfg = SceneConfig { bitemporal: seed % 2 == 0, ..SceneConfig::default() };
            let scene = generate_scene(seed, &cfg).unwrap();
            scene.check_invariants().unwrap();
            for o in &scene.objects_t0 {
                assert_eq!(CellBox::of_cells(&o.mask, scene.width()), Some(o.bbox));
                assert!(o.mask.iter().all(|&c| o.bbox.contains(c % 32, c / 32)));
            }
        }
    }

    #[test]
    fn bitemporal_scenes_change() {
        let cfg = SceneConfig { bitemporal: true, ..SceneConfig::default() };
        for seed in 0..30 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert_ne!(s.raster_t1.as_ref().unwrap(), &s.raster_t0);
        }
    }

    #[test]
    fn multilabel_is_distinct_object_classes() {
        let mut scene = generate_scene(2, &three_class_config()).unwrap();
        for (i, o) in scene.objects_t0.iter_mut().enumerate() {
            o.class_id = if i % 2 == 0 { 1 } else { 2 };
        }
        let ann = derive_annotation(&scene, TaskKind::MultiLabelCls, None).unwrap();
        assert_eq!(ann, Annotation::LabelSet { labels: vec!["plane".into(), "ship".into()] });
    }

    #[test]
    fn counting_matches_brute_force() {
        for seed in 0..40 {
            let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
            for &c in scene.class_table.keys() {
                let brute = scene.objects_t0.iter().filter(|o| o.class_id == c).count() as u32;
                let ann =
                    derive_annotation(&scene, TaskKind::Counting, Some(Target::Class(c))).unwrap();
                assert_eq!(ann, Annotation::Count { count: brute });
            }
        }
    }

    #[test]
    fn counting_three_objects_of_a_class() {
        let mut scene = generate_scene(1, &three_class_config()).unwrap();
        for (i, o) in scene.objects_t0.iter_mut().enumerate() {
            o.class_id = if i < 3 { 1 } else { 2 };
        }
        let ann = derive_annotation(&scene, TaskKind::Counting, Some(Target::Class(1))).unwrap();
        assert_eq!(ann, Annotation::Count { count: 3 });
    }

    #[test]
    fn semantic_masks_partition_the_grid() {
        let scene = generate_scene(11, &SceneConfig::default()).unwrap();
        let Annotation::ClassMasks { masks } =
            derive_annotation(&scene, TaskKind::SemanticSeg, None).unwrap()
        else {
            panic!("expected class masks");
        };
        let mut owner = vec![0u32; scene.raster_t0.len()];
        for (&class, cells) in &masks {
            for &c in &cells.0 {
                owner[c as usize] += 1;
                assert_eq!(scene.raster_t0.cells[c as usize], class);
            }
        }
        for (i, &n) in owner.iter().enumerate() {
            let background = scene.raster_t0.cells[i] == 0;
            assert_eq!(n, if background { 0 } else { 1 }, "cell {i}");
        }
    }

    #[test]
    fn change_detection_needs_second_epoch() {
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let err = derive_annotation(&scene, TaskKind::ChangeDetection, None).unwrap_err();
        assert!(matches!(err, SceneError::Incompatible { .. }));
    }

    #[test]
    fn contours_fill_back_to_masks() {
        for seed in 0..60 {
            let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
            for &c in scene.class_table.keys() {
                let cells = scene.raster_t0.class_cells(c);
                let loops = trace_loops(&cells, scene.width());
                assert_eq!(loops.len(), scene.count_of(c) as usize);
                assert_eq!(fill_loops(&loops, scene.width(), scene.height()), cells);
            }
        }
    }

    #[test]
    fn rectangle_contour_has_four_corners() {
        let cells: Vec<u32> = (1..3).flat_map(|y| (2..5).map(move |x| y * 8 + x)).collect();
        assert_eq!(trace_loops(&cells, 8), vec![vec![[2, 1], [5, 1], [5, 3], [2, 3]]]);
    }

    #[test]
    fn pinched_cells_trace_as_separate_loops() {
        // two cells touching only at a corner
        let cells = vec![0, 9];
        let loops = trace_loops(&cells, 8);
        assert_eq!(loops.len(), 2);
        assert_eq!(fill_loops(&loops, 8, 8), cells);
    }

    #[test]
    fn raster_serializes_as_runs() {
        let r = Raster { width: 4, height: 2, cells: vec![0, 0, 1, 1, 1, 0, 0, 0] };
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, r#"{"width":4,"height":2,"runs":[[0,2],[1,3],[0,3]]}"#);
        assert_eq!(serde_json::from_str::<Raster>(&json).unwrap(), r);
        let short = r#"{"width":4,"height":2,"runs":[[0,2]]}"#;
        assert!(serde_json::from_str::<Raster>(short).is_err());
    }
}
