//! Vague-query datasets over synthetic scenes.
//!
//! Queries come from a fixed bank of paraphrase templates. Intrinsic tasks
//! reserve their last two templates for the test split; extrinsic tasks only
//! ever appear in the test split.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    derive_annotation, generate_scene, Annotation, Scene, SceneConfig, SceneError, Target,
};

pub const MANIFEST_ID: &str = "__manifest__";

/// Words and phrases a vague query may not contain.
pub const VAGUENESS_BLOCKLIST: [&str; 9] = [
    "segment",
    "segmentation",
    "detect",
    "detection",
    "bounding box",
    "classify",
    "classification",
    "ground",
    "contour",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SceneCls,
    MultiLabelCls,
    VisualGrounding,
    Counting,
    RegionReasoning,
    Detection,
    SemanticSeg,
    ReferringSeg,
    ChangeDetection,
    ContourExtraction,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::SceneCls,
        TaskKind::MultiLabelCls,
        TaskKind::VisualGrounding,
        TaskKind::Counting,
        TaskKind::RegionReasoning,
        TaskKind::Detection,
        TaskKind::SemanticSeg,
        TaskKind::ReferringSeg,
        TaskKind::ChangeDetection,
        TaskKind::ContourExtraction,
    ];

    pub const INTRINSIC: [TaskKind; 5] = [
        TaskKind::SceneCls,
        TaskKind::MultiLabelCls,
        TaskKind::VisualGrounding,
        TaskKind::Counting,
        TaskKind::RegionReasoning,
    ];

    pub const EXTRINSIC: [TaskKind; 5] = [
        TaskKind::Detection,
        TaskKind::SemanticSeg,
        TaskKind::ReferringSeg,
        TaskKind::ChangeDetection,
        TaskKind::ContourExtraction,
    ];

    pub fn is_intrinsic(self) -> bool {
        Self::INTRINSIC.contains(&self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SceneCls => "scene_cls",
            TaskKind::MultiLabelCls => "multi_label_cls",
            TaskKind::VisualGrounding => "visual_grounding",
            TaskKind::Counting => "counting",
            TaskKind::RegionReasoning => "region_reasoning",
            TaskKind::Detection => "detection",
            TaskKind::SemanticSeg => "semantic_seg",
            TaskKind::ReferringSeg => "referring_seg",
            TaskKind::ChangeDetection => "change_detection",
            TaskKind::ContourExtraction => "contour_extraction",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Expert tool that serves an extrinsic task.
    pub fn tool(self) -> Option<&'static str> {
        match self {
            TaskKind::Detection => Some("det"),
            TaskKind::SemanticSeg => Some("seg"),
            TaskKind::ReferringSeg => Some("res"),
            TaskKind::ChangeDetection => Some("cd"),
            TaskKind::ContourExtraction => Some("ce"),
            _ => None,
        }
    }

    pub fn needs_class(self) -> bool {
        !matches!(self, TaskKind::SceneCls | TaskKind::MultiLabelCls | TaskKind::ChangeDetection)
    }

    /// Whether the annotation variant is the one this task produces.
    pub fn accepts(self, ann: &Annotation) -> bool {
        matches!(
            (self, ann),
            (TaskKind::SceneCls, Annotation::Label { .. })
                | (TaskKind::MultiLabelCls, Annotation::LabelSet { .. })
                | (TaskKind::VisualGrounding, Annotation::BoxSet { .. })
                | (TaskKind::Counting, Annotation::Count { .. })
                | (TaskKind::RegionReasoning, Annotation::Box { .. })
                | (TaskKind::Detection, Annotation::BoxSet { .. })
                | (TaskKind::SemanticSeg, Annotation::Mask { .. } | Annotation::ClassMasks { .. })
                | (TaskKind::ReferringSeg, Annotation::Mask { .. })
                | (TaskKind::ChangeDetection, Annotation::MaskPair { .. })
                | (TaskKind::ContourExtraction, Annotation::Contours { .. })
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("query synthesis failed: {0}")]
    Query(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset integrity violated: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Slot values substituted into a template.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryTarget {
    pub class: Option<String>,
    pub size: Option<String>,
    pub position: Option<String>,
}

impl QueryTarget {
    pub fn class(name: &str) -> Self {
        QueryTarget { class: Some(name.to_string()), ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplatePool {
    /// Every template of the task.
    All,
    /// Templates available to the training split.
    Train,
    /// Templates used for the test split (held-out ones for intrinsic tasks).
    Test,
}

pub const HELD_OUT_PER_TASK: usize = 2;

pub fn templates(task: TaskKind) -> &'static [&'static str] {
    match task {
        TaskKind::SceneCls => &[
            "what kind of place is this?",
            "what sort of area am i looking at?",
            "how would you describe this place overall?",
            "what is this area mostly used for?",
            "can you tell me what type of place this is?",
            "what would you call this kind of area?",
            "what type of site does this look like?",
            "in a word, what kind of place are we looking at?",
            "any idea what kind of site this is?",
            "what sort of place would you say this is?",
        ],
        TaskKind::MultiLabelCls => &[
            "what things can you see in this picture?",
            "which kinds of stuff show up here?",
            "tell me what sorts of things are present",
            "what is in this image?",
            "list the kinds of things you notice here",
            "what types of things appear in this area?",
            "which things are present in this place?",
            "what can i find in this picture?",
            "what kinds of things are in this area?",
            "tell me which things you notice in this picture",
        ],
        TaskKind::VisualGrounding => &[
            "can you point out any {cs} here?",
            "where are the {cs} in this picture?",
            "show me where the {cs} are",
            "point to the {cs} please",
            "whereabouts are the {cs}?",
            "could you point at the {cs}?",
            "where can i spot the {cs}?",
            "show me roughly where the {cs} sit",
            "where would i find the {cs} here?",
            "can you show me where any {cs} are?",
        ],
        TaskKind::Counting => &[
            "how many {cs} are there?",
            "how many {cs} can you count here?",
            "what is the number of {cs} in this picture?",
            "count the {cs} for me",
            "how many {cs} do you see?",
            "give me the number of {cs}",
            "roughly how many {cs} are in this area?",
            "tell me how many {cs} there are",
            "how many {cs} show up here?",
            "what number of {cs} can you see?",
        ],
        TaskKind::RegionReasoning => &[
            "which {c} is the biggest one?",
            "where is the largest {c}?",
            "point to the biggest {c} here",
            "which {c} takes up the most room?",
            "show me the {c} that is largest",
            "where is the most sizable {c}?",
            "which {c} looks biggest?",
            "which {c} is the largest of them all?",
            "where is the biggest {c} in this area?",
            "which {c} takes the most room here?",
        ],
        TaskKind::Detection => &[
            "frame every individual {c} in this picture",
            "put a tight frame on each {c}",
            "mark each individual {c} with its own frame",
            "give every {c} its own tight frame",
            "frame each {c} one by one",
            "i need a frame around every single {c}",
            "tag each individual {c} with a frame",
            "every {c} here should get a tight frame",
            "frame all the {cs} individually",
            "draw a tight frame around each {c}",
        ],
        TaskKind::SemanticSeg => &[
            "paint the full coverage of {cs} pixel by pixel",
            "shade in all the {c} pixels",
            "which pixels belong to {cs}? paint them",
            "show the full {c} coverage across the scene",
            "paint over the {c} pixels",
            "give me the {c} coverage across the whole picture",
            "shade the pixels that are {c}",
            "paint all {c} coverage",
            "mark the pixels covered by {cs} with shading",
            "i want full pixel coverage for {cs}",
        ],
        TaskKind::ReferringSeg => &[
            "isolate the exact shape of the {size} {c} in the {pos}",
            "i want the particular {size} {c} over at the {pos}, its exact shape",
            "give me the exact shape of that {size} {c} near the {pos}",
            "just the {size} {c} in the {pos} please, exact shape",
            "the {size} {c} at the {pos}: isolate its shape",
            "can you isolate that particular {size} {c} in the {pos}?",
            "exact shape of the {size} {c} toward the {pos}",
            "isolate the {size} {c} sitting in the {pos}",
            "show the shape of the particular {size} {c} at the {pos}",
            "only the {size} {c} in the {pos}, i need its exact shape",
        ],
        TaskKind::ChangeDetection => &[
            "what changed between the earlier and later pictures?",
            "compare the two pictures and tell me what changed",
            "what is different between the earlier and later views?",
            "what changed here since the earlier picture?",
            "compare earlier with later: what changed?",
            "did anything get changed between the two dates?",
            "compare the later picture against the earlier one",
            "what has changed since the earlier visit?",
            "tell me what changed between these two epochs",
            "compare both dates and show what changed",
        ],
        TaskKind::ContourExtraction => &[
            "trace the outline of the {cs}",
            "follow the edges of the {cs}",
            "give me the border of the {cs}",
            "trace along the {c} edges",
            "outline the {cs} for me",
            "where do the {c} borders run? trace them",
            "i need the outlines of the {cs}",
            "sketch the edges around the {cs}",
            "trace the {c} border",
            "show the outline along the {cs}",
        ],
    }
}

pub fn template_id(task: TaskKind, index: usize) -> String {
    format!("{}-{index:02}", task.as_str())
}

fn pool_range(task: TaskKind, pool: TemplatePool) -> std::ops::Range<usize> {
    let n = templates(task).len();
    match (pool, task.is_intrinsic()) {
        (TemplatePool::All, _) | (TemplatePool::Test, false) => 0..n,
        (TemplatePool::Train, true) => 0..n - HELD_OUT_PER_TASK,
        (TemplatePool::Test, true) => n - HELD_OUT_PER_TASK..n,
        (TemplatePool::Train, false) => 0..0,
    }
}

/// Plural surface form used by templates.
pub fn plural(class: &str) -> String {
    format!("{class}s")
}

/// True when the text contains a blocklisted word or phrase.
pub fn violates_vagueness(text: &str) -> bool {
    let words: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect();
    let joined = words.join(" ");
    VAGUENESS_BLOCKLIST.iter().any(|b| {
        if b.contains(' ') {
            joined.contains(b)
        } else {
            words.iter().any(|w| w == b)
        }
    })
}

pub fn synthesize_query<R: Rng>(
    task: TaskKind,
    target: &QueryTarget,
    rng: &mut R,
) -> Result<(String, String), DatasetError> {
    synthesize_query_from(task, target, TemplatePool::All, rng)
}

pub fn synthesize_query_from<R: Rng>(
    task: TaskKind,
    target: &QueryTarget,
    pool: TemplatePool,
    rng: &mut R,
) -> Result<(String, String), DatasetError> {
    let range = pool_range(task, pool);
    if range.is_empty() {
        return Err(DatasetError::Query(format!("no {pool:?} templates for {task}")));
    }
    let index = rng.gen_range(range);
    let template = templates(task)[index];
    let slot = |name: &str, v: &Option<String>| {
        v.clone().ok_or_else(|| DatasetError::Query(format!("{task} template needs a {name}")))
    };
    let mut text = template.to_string();
    if text.contains("{c") {
        let class = slot("class", &target.class)?;
        text = text.replace("{cs}", &plural(&class)).replace("{c}", &class);
    }
    if text.contains("{size}") {
        text = text.replace("{size}", &slot("size", &target.size)?);
    }
    if text.contains("{pos}") {
        text = text.replace("{pos}", &slot("position", &target.position)?.replace('-', " "));
    }
    Ok((text, template_id(task, index)))
}

/// Like [`synthesize_query`], but checks the class against a scene's table.
pub fn synthesize_query_for(
    scene: &Scene,
    task: TaskKind,
    target: &QueryTarget,
    pool: TemplatePool,
    rng: &mut ChaCha8Rng,
) -> Result<(String, String), DatasetError> {
    if let Some(class) = &target.class {
        if scene.class_id(class).is_none() {
            return Err(DatasetError::Query(format!("class {class:?} not in the class table")));
        }
    }
    synthesize_query_from(task, target, pool, rng)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInstance {
    pub id: String,
    pub scene: Scene,
    pub query_text: String,
    pub task: TaskKind,
    pub template_id: String,
    pub ground_truth: Annotation,
}

impl QueryInstance {
    pub fn check(&self) -> Result<(), DatasetError> {
        if !self.task.accepts(&self.ground_truth) {
            return Err(DatasetError::Integrity(format!(
                "{}: {} annotation does not fit task {}",
                self.id,
                self.ground_truth.granularity(),
                self.task
            )));
        }
        if violates_vagueness(&self.query_text) {
            return Err(DatasetError::Integrity(format!(
                "{}: query {:?} uses a blocklisted keyword",
                self.id, self.query_text
            )));
        }
        Ok(())
    }

    /// Recovers the annotation target named by the query text.
    pub fn target(&self) -> Option<Target> {
        infer_target(self.task, &self.query_text, &self.scene)
    }
}

/// Reads the class (and, for referring queries, the attributes) out of a query.
pub fn infer_target(task: TaskKind, query: &str, scene: &Scene) -> Option<Target> {
    if !task.needs_class() {
        return None;
    }
    let words: Vec<&str> =
        query.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let class = scene.class_table.iter().find_map(|(&id, name)| {
        let pl = plural(name);
        words.iter().any(|w| *w == name || *w == pl).then_some(id)
    })?;
    if task != TaskKind::ReferringSeg {
        return Some(Target::Class(class));
    }
    let size = words.iter().find(|w| **w == "small" || **w == "large")?;
    let vertical = words.iter().find(|w| **w == "top" || **w == "bottom")?;
    let horizontal = words.iter().find(|w| **w == "left" || **w == "right")?;
    let attrs = [size.to_string(), format!("{vertical}-{horizontal}")];
    match scene.matching_objects(class, &attrs).as_slice() {
        [only] => Some(Target::Object(*only)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub scene: SceneConfig,
}

impl DatasetConfig {
    /// 1000 training queries per intrinsic task, 100 test queries per task.
    pub fn paper() -> Self {
        DatasetConfig { train_per_task: 1000, test_per_task: 100, scene: SceneConfig::default() }
    }

    pub fn desk() -> Self {
        DatasetConfig { train_per_task: 100, test_per_task: 20, scene: SceneConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    pub seed: u64,
    pub train: BTreeMap<TaskKind, usize>,
    pub test: BTreeMap<TaskKind, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<QueryInstance>,
    pub test: Vec<QueryInstance>,
    pub manifest: Manifest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix(acc ^ mix(p)))
}

const INSTANCE_ATTEMPTS: u64 = 200;

fn pick_target(
    task: TaskKind,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
) -> Option<(Option<Target>, QueryTarget)> {
    let present: Vec<u8> =
        scene.class_table.keys().copied().filter(|&c| scene.count_of(c) > 0).collect();
    let name = |c: u8| scene.class_name(c).unwrap_or_default().to_string();
    let class_pick = |cands: Vec<u8>, rng: &mut ChaCha8Rng| {
        cands.choose(rng).map(|&c| (Some(Target::Class(c)), QueryTarget::class(&name(c))))
    };
    match task {
        TaskKind::SceneCls | TaskKind::MultiLabelCls => {
            (!present.is_empty()).then(|| (None, QueryTarget::default()))
        }
        TaskKind::ChangeDetection => {
            scene.raster_t1.is_some().then(|| (None, QueryTarget::default()))
        }
        TaskKind::VisualGrounding => {
            let cands = present.into_iter().filter(|&c| scene.count_of(c) <= 3).collect();
            class_pick(cands, rng)
        }
        TaskKind::RegionReasoning => {
            let cands = present
                .into_iter()
                .filter(|&c| scene.count_of(c) >= 2 && scene.largest_of(c).is_some())
                .collect();
            class_pick(cands, rng)
        }
        TaskKind::Counting
        | TaskKind::Detection
        | TaskKind::SemanticSeg
        | TaskKind::ContourExtraction => class_pick(present, rng),
        TaskKind::ReferringSeg => {
            let unique: Vec<usize> = (0..scene.objects_t0.len())
                .filter(|&i| {
                    let o = &scene.objects_t0[i];
                    scene.matching_objects(o.class_id, &o.attributes).len() == 1
                })
                .collect();
            let &i = unique.choose(rng)?;
            let o = &scene.objects_t0[i];
            Some((
                Some(Target::Object(i)),
                QueryTarget {
                    class: Some(name(o.class_id)),
                    size: Some(o.size_word().to_string()),
                    position: Some(o.position_word().to_string()),
                },
            ))
        }
    }
}

fn make_instance(
    split: Split,
    task: TaskKind,
    index: usize,
    seed: u64,
    config: &DatasetConfig,
    used_scenes: &mut HashSet<String>,
) -> Result<QueryInstance, DatasetError> {
    let scene_config = SceneConfig {
        bitemporal: task == TaskKind::ChangeDetection,
        ..config.scene.clone()
    };
    let pool = match split {
        Split::Train => TemplatePool::Train,
        Split::Test => TemplatePool::Test,
    };
    let task_no = TaskKind::ALL.iter().position(|&t| t == task).unwrap_or(0) as u64;
    for attempt in 0..INSTANCE_ATTEMPTS {
        let split_no = split as u64;
        let scene_seed = derive_seed(&[seed, split_no, task_no, index as u64, attempt]);
        let scene = generate_scene(scene_seed, &scene_config)?;
        if used_scenes.contains(&scene.id) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[scene_seed, 0x71]));
        let Some((target, slots)) = pick_target(task, &scene, &mut rng) else {
            continue;
        };
        let (query_text, template_id) =
            synthesize_query_for(&scene, task, &slots, pool, &mut rng)?;
        let ground_truth = derive_annotation(&scene, task, target)?;
        used_scenes.insert(scene.id.clone());
        let instance = QueryInstance {
            id: format!("{}-{}-{index:05}", split.prefix(), task.as_str()),
            scene,
            query_text,
            task,
            template_id,
            ground_truth,
        };
        instance.check()?;
        return Ok(instance);
    }
    Err(DatasetError::Query(format!(
        "no usable scene for {task} #{index} after {INSTANCE_ATTEMPTS} attempts"
    )))
}

pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset, DatasetError> {
    config.scene.validate()?;
    let mut used = HashSet::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for task in TaskKind::INTRINSIC {
        for i in 0..config.train_per_task {
            train.push(make_instance(Split::Train, task, i, seed, config, &mut used)?);
        }
    }
    for task in TaskKind::ALL {
        for i in 0..config.test_per_task {
            test.push(make_instance(Split::Test, task, i, seed, config, &mut used)?);
        }
    }
    let manifest = Manifest {
        id: MANIFEST_ID.to_string(),
        seed,
        train: TaskKind::INTRINSIC.iter().map(|&t| (t, config.train_per_task)).collect(),
        test: TaskKind::ALL.iter().map(|&t| (t, config.test_per_task)).collect(),
    };
    Ok(Dataset { train, test, manifest })
}

fn count_by_task(items: &[QueryInstance]) -> BTreeMap<TaskKind, usize> {
    let mut counts = BTreeMap::new();
    for q in items {
        *counts.entry(q.task).or_insert(0) += 1;
    }
    counts
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &QueryInstance> {
        self.train.iter().chain(&self.test)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.train.iter().any(|q| !q.task.is_intrinsic()) {
            return Err(DatasetError::Integrity("train split holds an extrinsic task".into()));
        }
        let nonzero = |m: &BTreeMap<TaskKind, usize>| -> BTreeMap<TaskKind, usize> {
            m.iter().filter(|(_, &n)| n > 0).map(|(&t, &n)| (t, n)).collect()
        };
        if count_by_task(&self.train) != nonzero(&self.manifest.train) {
            return Err(DatasetError::Integrity("train counts differ from manifest".into()));
        }
        if count_by_task(&self.test) != nonzero(&self.manifest.test) {
            return Err(DatasetError::Integrity("test counts differ from manifest".into()));
        }
        for q in self.all() {
            q.check()?;
        }
        Ok(())
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.all().map(|q| &q.scene).find(|s| s.id == id)
    }
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &dataset.manifest)
        .map_err(|e| DatasetError::Integrity(e.to_string()))?;
    out.write_all(b"\n")?;
    for q in dataset.all() {
        serde_json::to_writer(&mut out, q).map_err(|e| DatasetError::Integrity(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Dataset, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut manifest: Option<Manifest> = None;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        if manifest.is_none() {
            let m: Manifest = serde_json::from_str(&line).map_err(parse_err)?;
            if m.id != MANIFEST_ID {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: format!("expected manifest line with id {MANIFEST_ID:?}"),
                });
            }
            manifest = Some(m);
            continue;
        }
        let q: QueryInstance = serde_json::from_str(&line).map_err(parse_err)?;
        q.scene.check_invariants().map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if q.id.starts_with("train-") {
            train.push(q);
        } else if q.id.starts_with("test-") {
            test.push(q);
        } else {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("instance id {:?} names no split", q.id),
            });
        }
    }
    let manifest = manifest
        .ok_or_else(|| DatasetError::Parse { line: 1, message: "missing manifest line".into() })?;
    let dataset = Dataset { train, test, manifest };
    dataset.validate()?;
    Ok(dataset)
}
