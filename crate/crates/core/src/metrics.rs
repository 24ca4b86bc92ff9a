//! Dense and textual scores, the supervised baseline, and report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{epoch_batches, GrpoConfig, GrpoError, TrainingSet};
use crate::mcp::DensePrediction;
use crate::policy::{
    accumulate_grad_logprob, sequence_logprob, Features, PolicyModel, PolicyParams, PolicySnapshots,
};
use crate::reward::{dispatch_reward, hungarian, iou, render_answer, BoxCoords};
use crate::router::{RouteResult, RouteTrace};
use crate::scene::{Annotation, CellBox};
use crate::vagueeo::{QueryInstance, TaskKind};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction {pred} cannot be scored against a {gt} annotation")]
    ShapeMismatch { pred: &'static str, gt: &'static str },
    #[error("report needs at least one instance")]
    Empty,
    #[error("run id mismatch: {0:?} vs {1:?}")]
    RunMismatch(String, String),
    #[error("no test instance {0:?}")]
    UnknownInstance(String),
    #[error("tasks in the report differ from the test set")]
    TaskMismatch,
    #[error(transparent)]
    Training(#[from] GrpoError),
}

/// Per-instance dense score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseScore {
    pub iou: f64,
    pub intersection: f64,
    pub union: f64,
    /// Prediction and annotation are identical.
    pub exact: bool,
    /// Cellwise F1 of the change mask (change detection only).
    pub f1: Option<f64>,
}

fn prediction_kind(p: &DensePrediction) -> &'static str {
    match p {
        DensePrediction::Boxes { .. } => "boxes",
        DensePrediction::Mask { .. } => "mask",
        DensePrediction::MaskPair { .. } => "mask-pair",
        DensePrediction::Contours { .. } => "contours",
    }
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

fn set_overlap(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> (f64, f64) {
    let inter = a.intersection(b).count() as f64;
    (inter, a.len() as f64 + b.len() as f64 - inter)
}

fn mask_score(pred: &[u32], gt: &[u32]) -> DenseScore {
    let p: BTreeSet<u32> = pred.iter().copied().collect();
    let g: BTreeSet<u32> = gt.iter().copied().collect();
    let (inter, union) = set_overlap(&p, &g);
    DenseScore { iou: ratio(inter, union), intersection: inter, union, exact: p == g, f1: None }
}

fn box_area(b: &CellBox) -> f64 {
    (b.x2.saturating_sub(b.x1) * b.y2.saturating_sub(b.y1)) as f64
}

fn coords(b: &CellBox) -> BoxCoords {
    [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64]
}

/// Boxes are paired by maximum total IoU; unmatched boxes count as misses.
fn box_score(pred: &[CellBox], gt: &[CellBox]) -> DenseScore {
    let mut p_sorted = pred.to_vec();
    let mut g_sorted = gt.to_vec();
    p_sorted.sort();
    g_sorted.sort();
    let exact = p_sorted == g_sorted;
    if pred.is_empty() || gt.is_empty() {
        let union: f64 = pred.iter().chain(gt).map(box_area).sum();
        let both = pred.is_empty() && gt.is_empty();
        return DenseScore { iou: if both { 1.0 } else { 0.0 }, intersection: 0.0, union, exact, f1: None };
    }
    let matrix: Vec<Vec<f64>> =
        gt.iter().map(|g| pred.iter().map(|p| iou(&coords(p), &coords(g))).collect()).collect();
    let pairs = hungarian(&matrix, true);
    let mut inter = 0.0;
    let mut matched_iou = 0.0;
    for &(gi, pi) in &pairs {
        let (g, p) = (&gt[gi], &pred[pi]);
        let ix = g.x2.min(p.x2).saturating_sub(g.x1.max(p.x1));
        let iy = g.y2.min(p.y2).saturating_sub(g.y1.max(p.y1));
        inter += (ix * iy) as f64;
        matched_iou += matrix[gi][pi];
    }
    let union = pred.iter().chain(gt).map(box_area).sum::<f64>() - inter;
    let iou = matched_iou / pred.len().max(gt.len()) as f64;
    DenseScore { iou, intersection: inter, union, exact, f1: None }
}

fn pair_score(pb: &[u32], pa: &[u32], gb: &[u32], ga: &[u32]) -> DenseScore {
    let b = mask_score(pb, gb);
    let a = mask_score(pa, ga);
    let inter = b.intersection + a.intersection;
    let union = b.union + a.union;
    let p: BTreeSet<u32> = pb.iter().chain(pa).copied().collect();
    let g: BTreeSet<u32> = gb.iter().chain(ga).copied().collect();
    let tp = p.intersection(&g).count() as f64;
    let denom = p.len() as f64 + g.len() as f64;
    let f1 = if denom == 0.0 { 1.0 } else { 2.0 * tp / denom };
    DenseScore { iou: ratio(inter, union), intersection: inter, union, exact: b.exact && a.exact, f1: Some(f1) }
}

/// Unit boundary edges of a set of loops, each keyed by its lower-left endpoint and direction.
fn loop_edges(loops: &[Vec<[u32; 2]>]) -> BTreeSet<([u32; 2], bool)> {
    let mut edges = BTreeSet::new();
    for l in loops {
        for (k, &a) in l.iter().enumerate() {
            let b = l[(k + 1) % l.len()];
            let horizontal = a[1] == b[1];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let steps = if horizontal { hi[0] - lo[0] } else { hi[1] - lo[1] };
            for s in 0..steps {
                let start = if horizontal { [lo[0] + s, lo[1]] } else { [lo[0], lo[1] + s] };
                edges.insert((start, horizontal));
            }
        }
    }
    edges
}

fn contour_score(pred: &[Vec<[u32; 2]>], gt: &[Vec<[u32; 2]>]) -> DenseScore {
    let p = loop_edges(pred);
    let g = loop_edges(gt);
    let inter = p.intersection(&g).count() as f64;
    let union = p.len() as f64 + g.len() as f64 - inter;
    DenseScore { iou: ratio(inter, union), intersection: inter, union, exact: p == g, f1: None }
}

pub fn score_dense(pred: &DensePrediction, gt: &Annotation) -> Result<DenseScore, MetricsError> {
    match (pred, gt) {
        (DensePrediction::Boxes { boxes }, Annotation::BoxSet { boxes: g }) => Ok(box_score(boxes, g)),
        (DensePrediction::Boxes { boxes }, Annotation::Box { bbox }) => {
            Ok(box_score(boxes, std::slice::from_ref(bbox)))
        }
        (DensePrediction::Mask { cells, .. }, Annotation::Mask { cells: g, .. }) => Ok(mask_score(cells, g)),
        (DensePrediction::Mask { class_id, cells }, Annotation::ClassMasks { masks }) => {
            let g = masks.get(class_id).map(|r| r.0.as_slice()).unwrap_or_default();
            Ok(mask_score(cells, g))
        }
        (DensePrediction::MaskPair { before, after }, Annotation::MaskPair { before: gb, after: ga }) => {
            Ok(pair_score(before, after, gb, ga))
        }
        (DensePrediction::Contours { loops }, Annotation::Contours { loops: g }) => Ok(contour_score(loops, g)),
        _ => Err(MetricsError::ShapeMismatch { pred: prediction_kind(pred), gt: gt.granularity() }),
    }
}

/// Score of one routed instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    pub task: TaskKind,
    /// Reward of a direct answer.
    pub answer_reward: Option<f64>,
    pub dense: Option<DenseScore>,
}

/// Scores the final result of a trace. Answers to extrinsic tasks and tool
/// output on intrinsic tasks score zero rather than failing.
pub fn score_trace(instance: &QueryInstance, trace: &RouteTrace) -> InstanceScore {
    let mut score = InstanceScore {
        instance_id: instance.id.clone(),
        task: instance.task,
        answer_reward: None,
        dense: None,
    };
    let zero = DenseScore { iou: 0.0, intersection: 0.0, union: 0.0, exact: false, f1: None };
    if instance.task.is_intrinsic() {
        let reward = match (&trace.result, render_answer(&instance.ground_truth)) {
            (RouteResult::Answer { text }, Some(gt)) => dispatch_reward(text, &gt).map_or(0.0, |r| r.value),
            _ => 0.0,
        };
        score.answer_reward = Some(reward);
    } else {
        let dense = match &trace.result {
            RouteResult::Dense { prediction } => score_dense(prediction, &instance.ground_truth).unwrap_or(zero),
            _ => zero,
        };
        let f1 = (instance.task == TaskKind::ChangeDetection).then(|| dense.f1.unwrap_or(0.0));
        score.dense = Some(DenseScore { f1, ..dense });
    }
    score
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub instances: usize,
    /// Fraction of direct answers with full reward.
    pub acc: Option<f64>,
    pub mean_reward: Option<f64>,
    pub acc_at_05: Option<f64>,
    pub miou: Option<f64>,
    pub oiou: Option<f64>,
    /// Fraction of dense predictions identical to the annotation.
    pub exact: Option<f64>,
    pub f1: Option<f64>,
}

pub fn aggregate(scores: &[&InstanceScore]) -> TaskMetrics {
    let n = scores.len();
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let rewards: Vec<f64> = scores.iter().filter_map(|s| s.answer_reward).collect();
    let dense: Vec<&DenseScore> = scores.iter().filter_map(|s| s.dense.as_ref()).collect();
    let (inter, union) = dense.iter().fold((0.0, 0.0), |(i, u), d| (i + d.intersection, u + d.union));
    TaskMetrics {
        instances: n,
        acc: mean(rewards.iter().map(|&r| if r >= 1.0 { 1.0 } else { 0.0 }).collect()),
        mean_reward: mean(rewards.clone()),
        acc_at_05: mean(dense.iter().map(|d| if d.iou >= 0.5 { 1.0 } else { 0.0 }).collect()),
        miou: mean(dense.iter().map(|d| d.iou).collect()),
        oiou: (!dense.is_empty()).then(|| ratio(inter, union)),
        exact: mean(dense.iter().map(|d| if d.exact { 1.0 } else { 0.0 }).collect()),
        f1: mean(dense.iter().filter_map(|d| d.f1).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub instance_id: String,
    pub task: TaskKind,
    pub route_round_trips: u64,
    pub route_llm_ms: f64,
    pub route_tool_ms: f64,
    pub route_total_ms: f64,
    pub react_round_trips: u64,
    pub react_llm_ms: f64,
    pub react_tool_ms: f64,
    pub react_total_ms: f64,
}

impl LatencyRow {
    pub fn from_traces(route: &RouteTrace, react: &RouteTrace) -> Self {
        LatencyRow {
            instance_id: route.instance_id.clone(),
            task: route.task,
            route_round_trips: route.round_trips,
            route_llm_ms: route.llm_ms,
            route_tool_ms: route.tool_ms,
            route_total_ms: route.total_ms,
            react_round_trips: react.round_trips,
            react_llm_ms: react.llm_ms,
            react_tool_ms: react.tool_ms,
            react_total_ms: react.total_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub run_id: String,
    pub rows: Vec<LatencyRow>,
}

impl LatencyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "instance_id,task,route_round_trips,route_llm_ms,route_tool_ms,route_total_ms,react_round_trips,react_llm_ms,react_tool_ms,react_total_ms\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.3},{:.3},{:.3},{},{:.3},{:.3},{:.3}",
                r.instance_id,
                r.task,
                r.route_round_trips,
                r.route_llm_ms,
                r.route_tool_ms,
                r.route_total_ms,
                r.react_round_trips,
                r.react_llm_ms,
                r.react_tool_ms,
                r.react_total_ms
            );
        }
        out
    }
}

/// Traces of one routing run, keyed by run id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub run_id: String,
    pub traces: Vec<RouteTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLog {
    pub run_id: String,
    pub scores: Vec<InstanceScore>,
}

impl ScoreLog {
    pub fn from_traces(log: &TraceLog, test: &[QueryInstance]) -> Result<Self, MetricsError> {
        let by_id: BTreeMap<&str, &QueryInstance> = test.iter().map(|q| (q.id.as_str(), q)).collect();
        let scores = log
            .traces
            .par_iter()
            .map(|t| {
                let q = by_id
                    .get(t.instance_id.as_str())
                    .ok_or_else(|| MetricsError::UnknownInstance(t.instance_id.clone()))?;
                Ok(score_trace(q, t))
            })
            .collect::<Result<_, MetricsError>>()?;
        Ok(ScoreLog { run_id: log.run_id.clone(), scores })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub instances: usize,
    pub route_round_trips: f64,
    pub route_llm_ms: f64,
    pub route_tool_ms: f64,
    pub route_total_ms: f64,
    pub react_round_trips: f64,
    pub react_llm_ms: f64,
    pub react_tool_ms: f64,
    pub react_total_ms: f64,
}

impl LatencySummary {
    pub fn from_rows(rows: &[LatencyRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let m = |f: fn(&LatencyRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        LatencySummary {
            instances: rows.len(),
            route_round_trips: m(|r| r.route_round_trips as f64),
            route_llm_ms: m(|r| r.route_llm_ms),
            route_tool_ms: m(|r| r.route_tool_ms),
            route_total_ms: m(|r| r.route_total_ms),
            react_round_trips: m(|r| r.react_round_trips as f64),
            react_llm_ms: m(|r| r.react_llm_ms),
            react_tool_ms: m(|r| r.react_tool_ms),
            react_total_ms: m(|r| r.react_total_ms),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub tasks: BTreeMap<TaskKind, TaskMetrics>,
    pub intent: BTreeMap<TaskKind, f64>,
    pub intent_mean: f64,
    pub latency: Option<LatencySummary>,
}

pub fn build_report(
    traces: &TraceLog,
    scores: &ScoreLog,
    latency: Option<&LatencyTable>,
) -> Result<EvalReport, MetricsError> {
    if traces.run_id != scores.run_id {
        return Err(MetricsError::RunMismatch(traces.run_id.clone(), scores.run_id.clone()));
    }
    if let Some(l) = latency {
        if l.run_id != traces.run_id {
            return Err(MetricsError::RunMismatch(traces.run_id.clone(), l.run_id.clone()));
        }
    }
    if traces.traces.is_empty() || scores.scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let trace_tasks: BTreeSet<TaskKind> = traces.traces.iter().map(|t| t.task).collect();
    let score_tasks: BTreeSet<TaskKind> = scores.scores.iter().map(|s| s.task).collect();
    if trace_tasks != score_tasks {
        return Err(MetricsError::TaskMismatch);
    }
    let mut hits: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    for t in &traces.traces {
        let e = hits.entry(t.task).or_default();
        e.0 += t.intent_correct() as usize;
        e.1 += 1;
    }
    let intent: BTreeMap<TaskKind, f64> =
        hits.iter().map(|(&t, &(h, n))| (t, h as f64 / n as f64)).collect();
    let intent_mean = intent.values().sum::<f64>() / intent.len() as f64;
    let tasks = score_tasks
        .iter()
        .map(|&task| {
            let of_task: Vec<&InstanceScore> = scores.scores.iter().filter(|s| s.task == task).collect();
            (task, aggregate(&of_task))
        })
        .collect();
    Ok(EvalReport {
        run_id: traces.run_id.clone(),
        tasks,
        intent,
        intent_mean,
        latency: latency.map(|l| LatencySummary::from_rows(&l.rows)),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,task,instances,intent_accuracy,acc,mean_reward,acc_at_05,miou,oiou,exact,f1\n");
        for (task, m) in &self.tasks {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{},{},{},{},{},{},{}",
                self.run_id,
                task,
                m.instances,
                self.intent.get(task).copied().unwrap_or(0.0),
                cell(m.acc),
                cell(m.mean_reward),
                cell(m.acc_at_05),
                cell(m.miou),
                cell(m.oiou),
                cell(m.exact),
                cell(m.f1)
            );
        }
        let _ = writeln!(out, "{},mean,,{:.4},,,,,,,", self.run_id, self.intent_mean);
        out
    }

    pub fn to_text(&self) -> String {
        let dash = |v: Option<f64>| v.map(|x| format!("{x:>7.4}")).unwrap_or_else(|| format!("{:>7}", "-"));
        let mut out = format!("run {}\n\n", self.run_id);
        let _ = writeln!(
            out,
            "{:<20} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "task", "n", "intent", "acc", "reward", "acc@0.5", "mIoU", "oIoU", "exact", "F1"
        );
        for (task, m) in &self.tasks {
            let _ = writeln!(
                out,
                "{:<20} {:>5} {:>7.4} {} {} {} {} {} {} {}",
                task.as_str(),
                m.instances,
                self.intent.get(task).copied().unwrap_or(0.0),
                dash(m.acc),
                dash(m.mean_reward),
                dash(m.acc_at_05),
                dash(m.miou),
                dash(m.oiou),
                dash(m.exact),
                dash(m.f1)
            );
        }
        let _ = writeln!(out, "\nmean intent accuracy {:.4}", self.intent_mean);
        if let Some(l) = &self.latency {
            let _ = writeln!(out, "\nlatency over {} instances (means)", l.instances);
            let _ = writeln!(out, "{:<8} {:>11} {:>10} {:>10} {:>10}", "", "round trips", "llm ms", "tool ms", "total ms");
            let _ = writeln!(
                out,
                "{:<8} {:>11.2} {:>10.2} {:>10.2} {:>10.2}",
                "route", l.route_round_trips, l.route_llm_ms, l.route_tool_ms, l.route_total_ms
            );
            let _ = writeln!(
                out,
                "{:<8} {:>11.2} {:>10.2} {:>10.2} {:>10.2}",
                "react", l.react_round_trips, l.react_llm_ms, l.react_tool_ms, l.react_total_ms
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRow {
    pub iteration: usize,
    /// Mean per-token log-likelihood of the batch targets before the update.
    pub batch_loglik: f64,
    /// The same over the whole training split, after the update.
    pub train_loglik: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftLog {
    pub rows: Vec<SftRow>,
}

impl SftLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,batch_loglik,train_loglik\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.8},{:.8}", r.iteration, r.batch_loglik, r.train_loglik);
        }
        out
    }
}

pub struct SftOutcome {
    pub snapshots: PolicySnapshots,
    pub log: SftLog,
    pub rng: ChaCha8Rng,
}

/// Canonical token sequence of an intrinsic instance's answer.
pub fn sft_target(model: &PolicyModel, instance: &QueryInstance) -> Result<Vec<usize>, GrpoError> {
    let text = render_answer(&instance.ground_truth)
        .ok_or_else(|| GrpoError::Data(format!("{} has no textual answer", instance.id)))?;
    model
        .vocab
        .encode_answer(&text)
        .ok_or_else(|| GrpoError::Data(format!("{}: answer {text:?} is outside the vocabulary", instance.id)))
}

/// Mean per-token log-likelihood of the targets of `indices`.
pub fn target_loglik(
    model: &PolicyModel,
    params: &PolicyParams,
    features: &[Features],
    targets: &[Vec<usize>],
    indices: &[usize],
) -> f64 {
    let total: f64 = indices
        .par_iter()
        .map(|&i| {
            let lp = sequence_logprob(model, params, &features[i], &targets[i]).expect("targets fit the model");
            lp / targets[i].len() as f64
        })
        .sum();
    total / indices.len().max(1) as f64
}

/// Supervised fine-tuning on the canonical answers, with the batch order,
/// iteration count and step size of the matching GRPO run.
pub fn train_sft_baseline(
    model: &PolicyModel,
    data: &TrainingSet,
    mut snapshots: PolicySnapshots,
    cfg: &GrpoConfig,
) -> Result<SftOutcome, MetricsError> {
    cfg.validate()?;
    let targets: Vec<Vec<usize>> =
        data.instances.iter().map(|q| sft_target(model, q)).collect::<Result<_, _>>()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = SftLog::default();
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            iteration += 1;
            let before = target_loglik(model, &snapshots.active, &data.features, &targets, &batch);
            for _ in 0..cfg.updates_per_batch {
                let scale = 1.0 / batch.len() as f64;
                let parts: Vec<PolicyParams> = batch
                    .par_iter()
                    .map(|&i| {
                        let mut g = PolicyParams::zeros(model);
                        let w = scale / targets[i].len() as f64;
                        accumulate_grad_logprob(model, &snapshots.active, &data.features[i], &targets[i], w, &mut g)
                            .expect("targets fit the model");
                        g
                    })
                    .collect();
                let mut grad = PolicyParams::zeros(model);
                for g in &parts {
                    grad.axpy(1.0, g);
                }
                if cfg.learning_rate != 0.0 {
                    snapshots.active.axpy(cfg.learning_rate, &grad);
                }
            }
            snapshots.sync_behavior();
            let train_loglik = target_loglik(model, &snapshots.active, &data.features, &targets, &all);
            log.rows.push(SftRow { iteration, batch_loglik: before, train_loglik });
        }
    }
    Ok(SftOutcome { snapshots, log, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcp::ToolRegistry;
    use crate::policy::{base_policy, PriorConfig};
    use crate::router::{oracle_action, Route};
    use crate::vagueeo::{build_dataset, DatasetConfig};
    use proptest::prelude::*;

    fn mask(cells: &[u32]) -> DensePrediction {
        DensePrediction::Mask { class_id: 1, cells: cells.to_vec() }
    }

    fn gt_mask(cells: &[u32]) -> Annotation {
        Annotation::Mask { class_id: 1, cells: cells.to_vec() }
    }

    fn dense_only(task: TaskKind, d: DenseScore) -> InstanceScore {
        InstanceScore { instance_id: String::new(), task, answer_reward: None, dense: Some(d) }
    }

    #[test]
    fn identity_and_disjoint() {
        let s = score_dense(&mask(&[1, 2, 3]), &gt_mask(&[1, 2, 3])).unwrap();
        assert_eq!((s.iou, s.exact), (1.0, true));
        let s = score_dense(&mask(&[1, 2]), &gt_mask(&[5, 6])).unwrap();
        assert_eq!(s.iou, 0.0);
        let b = CellBox::new(0, 0, 2, 2);
        let s = score_dense(&DensePrediction::Boxes { boxes: vec![b] }, &Annotation::BoxSet { boxes: vec![b] }).unwrap();
        assert_eq!((s.iou, s.exact), (1.0, true));
        assert!(score_dense(&mask(&[1]), &Annotation::Count { count: 1 }).is_err());
    }

    #[test]
    fn two_instance_aggregate() {
        // 5 of 5 cells, then 1 shared out of 5 in the union.
        let a = score_dense(&mask(&[0, 1, 2, 3, 4]), &gt_mask(&[0, 1, 2, 3, 4])).unwrap();
        let b = score_dense(&mask(&[10, 11, 12]), &gt_mask(&[12, 13, 14])).unwrap();
        assert_eq!(a.iou, 1.0);
        assert!((b.iou - 0.2).abs() < 1e-15);
        let scores = [dense_only(TaskKind::SemanticSeg, a), dense_only(TaskKind::SemanticSeg, b)];
        let m = aggregate(&scores.iter().collect::<Vec<_>>());
        assert!((m.miou.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(m.acc_at_05, Some(0.5));
        // (5 + 1) / (5 + 5)
        assert!((m.oiou.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn change_f1_is_cellwise() {
        let p = DensePrediction::MaskPair { before: vec![1, 2], after: vec![7] };
        let g = Annotation::MaskPair { before: vec![1], after: vec![7, 8] };
        let s = score_dense(&p, &g).unwrap();
        // tp = {1, 7}, |p| = 3, |g| = 3
        assert!((s.f1.unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn contour_edges_compare_as_sets() {
        let square = vec![vec![[0, 0], [2, 0], [2, 1], [0, 1]]];
        let shifted = vec![vec![[0, 0], [0, 1], [2, 1], [2, 0]]];
        let gt = Annotation::Contours { loops: square.clone() };
        let s = score_dense(&DensePrediction::Contours { loops: shifted }, &gt).unwrap();
        assert_eq!(s.iou, 1.0);
        let other = vec![vec![[0, 0], [1, 0], [1, 1], [0, 1]]];
        let s = score_dense(&DensePrediction::Contours { loops: other }, &gt).unwrap();
        // 3 shared edges; 6 + 4 - 3 distinct.
        assert!((s.iou - 3.0 / 7.0).abs() < 1e-12);
    }

    fn oracle_run(test: &[QueryInstance]) -> TraceLog {
        let traces = test
            .iter()
            .map(|q| {
                let action = oracle_action(q).unwrap();
                let result = match &action {
                    crate::router::AgentAction::DirectAnswer { answer_text } => {
                        RouteResult::Answer { text: answer_text.clone() }
                    }
                    crate::router::AgentAction::ToolCall { tool_id, params } => {
                        let mut args = params.clone();
                        args.insert("scene".into(), q.scene.id.clone());
                        let prediction =
                            crate::mcp::execute_tool(&ToolRegistry::default(), tool_id, &args, &q.scene).unwrap();
                        RouteResult::Dense { prediction }
                    }
                };
                RouteTrace {
                    instance_id: q.id.clone(),
                    task: q.task,
                    route: action.route(),
                    action: Some(action),
                    round_trips: 0,
                    llm_ms: 0.0,
                    tool_ms: 0.0,
                    total_ms: 0.0,
                    result,
                }
            })
            .collect();
        TraceLog { run_id: "r".into(), traces }
    }

    #[test]
    fn oracle_pipeline_is_perfect() {
        let ds = build_dataset(&DatasetConfig { train_per_task: 1, test_per_task: 4, ..DatasetConfig::desk() }, 3).unwrap();
        let traces = oracle_run(&ds.test);
        assert!(traces.traces.iter().all(|t| (t.route == Route::Extrinsic) == !t.task.is_intrinsic()));
        let scores = ScoreLog::from_traces(&traces, &ds.test).unwrap();
        let report = build_report(&traces, &scores, None).unwrap();
        assert_eq!(report.tasks.len(), 10);
        assert_eq!(report.intent_mean, 1.0);
        for (task, m) in &report.tasks {
            if task.is_intrinsic() {
                assert_eq!(m.acc, Some(1.0), "{task}");
            } else {
                assert_eq!(m.miou, Some(1.0), "{task}");
                assert_eq!(m.exact, Some(1.0), "{task}");
            }
        }
        let mean = report.intent.values().sum::<f64>() / 10.0;
        assert!((report.intent_mean - mean).abs() < 1e-15);
        let again = build_report(&traces, &scores, None).unwrap();
        assert_eq!(report.to_csv(), again.to_csv());
        assert_eq!(report.to_text(), again.to_text());
    }

    #[test]
    fn report_errors() {
        let empty = TraceLog { run_id: "a".into(), traces: vec![] };
        let scores = ScoreLog { run_id: "a".into(), scores: vec![] };
        assert!(matches!(build_report(&empty, &scores, None), Err(MetricsError::Empty)));
        let other = ScoreLog { run_id: "b".into(), scores: vec![] };
        assert!(matches!(build_report(&empty, &other, None), Err(MetricsError::RunMismatch(..))));
    }

    #[test]
    fn sft_zero_rate_is_identity() {
        let ds = build_dataset(&DatasetConfig { train_per_task: 3, test_per_task: 1, ..DatasetConfig::desk() }, 3).unwrap();
        let model = PolicyModel::new(&ds.train[0].scene.class_table, &ToolRegistry::default()).unwrap();
        let init = PolicySnapshots::new(base_policy(&model, &PriorConfig::default(), 0));
        let data = TrainingSet::new(&model, &ds.train).unwrap();
        let cfg = GrpoConfig { learning_rate: 0.0, epochs: 1, ..GrpoConfig::default() };
        let out = train_sft_baseline(&model, &data, init.clone(), &cfg).unwrap();
        assert_eq!(out.snapshots.active, init.active);
    }

    #[test]
    fn sft_raises_target_likelihood() {
        let ds = build_dataset(&DatasetConfig { train_per_task: 6, test_per_task: 1, ..DatasetConfig::desk() }, 3).unwrap();
        let model = PolicyModel::new(&ds.train[0].scene.class_table, &ToolRegistry::default()).unwrap();
        let init = PolicySnapshots::new(base_policy(&model, &PriorConfig::default(), 0));
        let data = TrainingSet::new(&model, &ds.train).unwrap();
        let cfg = GrpoConfig { epochs: 4, batch_size: 10, ..GrpoConfig::default() };
        let targets: Vec<Vec<usize>> = ds.train.iter().map(|q| sft_target(&model, q).unwrap()).collect();
        let all: Vec<usize> = (0..ds.train.len()).collect();
        let before = target_loglik(&model, &init.active, &data.features, &targets, &all);
        let out = train_sft_baseline(&model, &data, init, &cfg).unwrap();
        let log = out.log;
        let after = target_loglik(&model, &out.snapshots.active, &data.features, &targets, &all);
        assert!(after > before);
        assert_eq!(log.rows.len(), cfg.iterations(ds.train.len()));
    }

    proptest! {
        #[test]
        fn oiou_is_summed_ratio(sets in proptest::collection::vec(
            (proptest::collection::btree_set(0u32..40, 0..12), proptest::collection::btree_set(0u32..40, 1..12)), 1..6)) {
            let scores: Vec<InstanceScore> = sets
                .iter()
                .map(|(p, g)| {
                    let p: Vec<u32> = p.iter().copied().collect();
                    let g: Vec<u32> = g.iter().copied().collect();
                    dense_only(TaskKind::SemanticSeg, score_dense(&mask(&p), &gt_mask(&g)).unwrap())
                })
                .collect();
            let m = aggregate(&scores.iter().collect::<Vec<_>>());
            let inter: usize = sets.iter().map(|(p, g)| p.intersection(g).count()).sum();
            let union: usize = sets.iter().map(|(p, g)| p.union(g).count()).sum();
            prop_assert!((m.oiou.unwrap() - inter as f64 / union as f64).abs() < 1e-12);
            prop_assert!(m.miou.unwrap() >= 0.0 && m.miou.unwrap() <= 1.0);
        }

        #[test]
        fn acc_at_half_is_monotone(ious in proptest::collection::vec(0.0f64..1.0, 1..8), k in 0usize..8, bump in 0.0f64..1.0) {
            let k = k % ious.len();
            let make = |v: &[f64]| {
                v.iter()
                    .map(|&iou| dense_only(TaskKind::Detection, DenseScore { iou, intersection: 0.0, union: 0.0, exact: false, f1: None }))
                    .collect::<Vec<_>>()
            };
            let mut raised = ious.clone();
            raised[k] = (raised[k] + bump).min(1.0);
            let a = aggregate(&make(&ious).iter().collect::<Vec<_>>()).acc_at_05.unwrap();
            let b = aggregate(&make(&raised).iter().collect::<Vec<_>>()).acc_at_05.unwrap();
            prop_assert!(b >= a);
        }
    }
}
