//! Verifiable reward for answer spans.
//!
//! The scoring branch is chosen from the shape of the reference answer alone:
//! box tuples score by optimal IoU matching, lone numbers by relative error,
//! anything else by label recall.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Annotation;

pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const EXACT_TOLERANCE: f64 = 1e-9;
pub const REJECT_RELATIVE_ERROR: f64 = 0.5;
pub const DECAY_RATE: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reference answer is not well-formed: {0:?}")]
    InvalidGroundTruth(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerSpan {
    pub raw: String,
    pub valid: bool,
}

impl AnswerSpan {
    fn invalid() -> Self {
        AnswerSpan { raw: String::new(), valid: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Coord,
    Num,
    Text,
    Invalid,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Branch::Coord => "coord",
            Branch::Num => "num",
            Branch::Text => "text",
            Branch::Invalid => "invalid",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub value: f64,
    pub branch: Branch,
}

impl RewardValue {
    pub fn invalid() -> Self {
        RewardValue { value: 0.0, branch: Branch::Invalid }
    }
}

pub type BoxCoords = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub enum ParsedAnswer {
    Boxes(Vec<BoxCoords>),
    Scalar(f64),
    Labels(BTreeSet<String>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Divide the matched IoU sum by max(|G|, |P|) instead of |G|.
    pub precision_penalty: bool,
}

/// Pulls the content of the single `<answer>…</answer>` block.
pub fn extract_answer(output_text: &str) -> AnswerSpan {
    if output_text.matches(ANSWER_OPEN).count() != 1
        || output_text.matches(ANSWER_CLOSE).count() != 1
    {
        return AnswerSpan::invalid();
    }
    let (Some(open), Some(close)) = (output_text.find(ANSWER_OPEN), output_text.find(ANSWER_CLOSE))
    else {
        return AnswerSpan::invalid();
    };
    let start = open + ANSWER_OPEN.len();
    if close < start {
        return AnswerSpan::invalid();
    }
    let raw = output_text[start..close].trim();
    if raw.is_empty() {
        return AnswerSpan::invalid();
    }
    AnswerSpan { raw: raw.to_string(), valid: true }
}

/// Reference answers may come bare or wrapped in answer tags.
pub fn gt_span(gt_text: &str) -> AnswerSpan {
    if gt_text.contains(ANSWER_OPEN) || gt_text.contains(ANSWER_CLOSE) {
        return extract_answer(gt_text);
    }
    let raw = gt_text.trim();
    AnswerSpan { raw: raw.to_string(), valid: !raw.is_empty() }
}

fn is_separator(c: char) -> bool {
    c == ',' || c.is_whitespace()
}

fn parse_number(token: &str) -> Option<f64> {
    let body = token.strip_prefix(['+', '-']).unwrap_or(token);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |s: &str| s.chars().all(|c| c.is_ascii_digit());
    let ok = digits(int)
        && frac.is_none_or(digits)
        && (!int.is_empty() || frac.is_some_and(|f| !f.is_empty()));
    if !ok {
        return None;
    }
    token.parse().ok()
}

/// Box grammar: bracketed 4-tuples separated by commas or whitespace.
///
/// Returns `None` when the span is not shaped like a tuple list at all, and
/// the (possibly empty) list of well-formed boxes otherwise.
pub fn parse_boxes(span: &str) -> Option<Vec<BoxCoords>> {
    let mut boxes = Vec::new();
    let mut groups = 0;
    let mut rest = span;
    loop {
        let trimmed = rest.trim_start_matches(is_separator);
        if trimmed.is_empty() {
            break;
        }
        let inner_and_tail = trimmed.strip_prefix('[')?;
        let end = inner_and_tail.find(']')?;
        let inner = &inner_and_tail[..end];
        if inner.contains('[') {
            return None;
        }
        groups += 1;
        let nums: Vec<Option<f64>> =
            inner.split(is_separator).filter(|t| !t.is_empty()).map(parse_number).collect();
        if let [Some(x1), Some(y1), Some(x2), Some(y2)] = nums[..] {
            if x1 < x2 && y1 < y2 {
                boxes.push([x1, y1, x2, y2]);
            }
        }
        rest = &inner_and_tail[end + 1..];
    }
    (groups > 0).then_some(boxes)
}

pub fn parse_scalar(span: &str) -> Option<f64> {
    let mut tokens = span.split_whitespace();
    let token = tokens.next()?;
    if tokens.next().is_some() {
        return None;
    }
    parse_number(token)
}

pub fn parse_labels(span: &str) -> BTreeSet<String> {
    span.split([',', ';'])
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn infer_branch(gt: &AnswerSpan) -> Result<Branch, EvalError> {
    if !gt.valid {
        return Err(EvalError::InvalidGroundTruth(gt.raw.clone()));
    }
    if parse_boxes(&gt.raw).is_some_and(|b| !b.is_empty()) {
        Ok(Branch::Coord)
    } else if parse_scalar(&gt.raw).is_some() {
        Ok(Branch::Num)
    } else {
        Ok(Branch::Text)
    }
}

pub fn iou(a: &BoxCoords, b: &BoxCoords) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |r: &BoxCoords| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Optimal one-to-one assignment between the rows and columns of `matrix`.
///
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row, minimizing (or
/// maximizing) the total. Shortest-augmenting-path Hungarian method, O(n²m).
pub fn hungarian(matrix: &[Vec<f64>], maximize: bool) -> Vec<(usize, usize)> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| {
        let v = if transposed { matrix[j][i] } else { matrix[i][j] };
        if maximize { -v } else { v }
    };

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed { (j, i) } else { (i, j) }
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

pub fn reward_coord_with(pred: &[BoxCoords], gt: &[BoxCoords], cfg: RewardConfig) -> RewardValue {
    if gt.is_empty() || pred.is_empty() {
        return RewardValue { value: 0.0, branch: Branch::Coord };
    }
    let matrix: Vec<Vec<f64>> =
        gt.iter().map(|g| pred.iter().map(|p| iou(g, p)).collect()).collect();
    let total: f64 = hungarian(&matrix, true).iter().map(|&(i, j)| matrix[i][j]).sum();
    let denom = if cfg.precision_penalty { gt.len().max(pred.len()) } else { gt.len() };
    RewardValue { value: (total / denom as f64).clamp(0.0, 1.0), branch: Branch::Coord }
}

pub fn reward_coord(pred: &[BoxCoords], gt: &[BoxCoords]) -> RewardValue {
    reward_coord_with(pred, gt, RewardConfig::default())
}

pub fn reward_num(pred: f64, gt: f64) -> RewardValue {
    let value = if !pred.is_finite() || !gt.is_finite() {
        0.0
    } else if (pred - gt).abs() <= EXACT_TOLERANCE {
        1.0
    } else if gt == 0.0 {
        0.0
    } else {
        let rel = (pred - gt).abs() / gt.abs();
        if rel > REJECT_RELATIVE_ERROR { 0.0 } else { (-DECAY_RATE * rel).exp() }
    };
    RewardValue { value, branch: Branch::Num }
}

pub fn reward_text(pred: &BTreeSet<String>, gt: &BTreeSet<String>) -> RewardValue {
    let value = if gt.is_empty() {
        0.0
    } else {
        let hit = gt.intersection(pred).count();
        if hit == gt.len() { 1.0 } else { hit as f64 / gt.len() as f64 }
    };
    RewardValue { value, branch: Branch::Text }
}

pub fn parse_as(branch: Branch, span: &str) -> Option<ParsedAnswer> {
    match branch {
        Branch::Coord => parse_boxes(span).filter(|b| !b.is_empty()).map(ParsedAnswer::Boxes),
        Branch::Num => parse_scalar(span).map(ParsedAnswer::Scalar),
        Branch::Text => {
            let labels = parse_labels(span);
            (!labels.is_empty()).then_some(ParsedAnswer::Labels(labels))
        }
        Branch::Invalid => None,
    }
}

pub fn dispatch_reward_with(
    pred_text: &str,
    gt_text: &str,
    cfg: RewardConfig,
) -> Result<RewardValue, EvalError> {
    let gt = gt_span(gt_text);
    let branch = infer_branch(&gt)?;
    let gt_parsed =
        parse_as(branch, &gt.raw).ok_or_else(|| EvalError::InvalidGroundTruth(gt.raw.clone()))?;
    let pred = extract_answer(pred_text);
    if !pred.valid {
        return Ok(RewardValue::invalid());
    }
    let Some(pred_parsed) = parse_as(branch, &pred.raw) else {
        return Ok(RewardValue::invalid());
    };
    Ok(match (pred_parsed, gt_parsed) {
        (ParsedAnswer::Boxes(p), ParsedAnswer::Boxes(g)) => reward_coord_with(&p, &g, cfg),
        (ParsedAnswer::Scalar(p), ParsedAnswer::Scalar(g)) => reward_num(p, g),
        (ParsedAnswer::Labels(p), ParsedAnswer::Labels(g)) => reward_text(&p, &g),
        _ => RewardValue::invalid(),
    })
}

pub fn dispatch_reward(pred_text: &str, gt_text: &str) -> Result<RewardValue, EvalError> {
    dispatch_reward_with(pred_text, gt_text, RewardConfig::default())
}

/// Canonical reference-answer text for sparse annotations.
pub fn render_answer(ann: &Annotation) -> Option<String> {
    let render_box = |b: &crate::scene::CellBox| format!("[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2);
    match ann {
        Annotation::Label { label } => Some(label.clone()),
        Annotation::LabelSet { labels } => Some(labels.join(", ")),
        Annotation::Count { count } => Some(count.to_string()),
        Annotation::Box { bbox } => Some(render_box(bbox)),
        Annotation::BoxSet { boxes } => {
            Some(boxes.iter().map(render_box).collect::<Vec<_>>().join(", "))
        }
        _ => None,
    }
}
