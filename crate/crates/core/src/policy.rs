//! Toy autoregressive policy: one linear layer into a softmax over a small
//! token vocabulary, with exact log-probabilities and gradients.
//!
//! The input at each step is the query/scene feature vector, a one-hot of the
//! previous token (with a begin-of-sequence slot), and a sinusoidal position
//! code. Weights are stored column-major so that the sparse input touches a
//! contiguous block of logits per nonzero entry.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mcp::ToolRegistry;
use crate::reward::{ANSWER_CLOSE, ANSWER_OPEN};
use crate::scene::{scene_type, Scene, POSITION_WORDS, SIZE_WORDS};
use crate::vagueeo::{plural, templates, QueryInstance, TaskKind};

pub const MAX_LEN: usize = 48;
pub const LOGPROB_FLOOR: f64 = -30.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.95;
pub const POSITION_DIM: usize = 8;
/// Counts of the mentioned class are one-hot encoded up to this value.
pub const MENTION_SLOTS: usize = 10;
pub const EPOCH_PARAM: &str = "t1";

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRTRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("position {position} is past the maximum length {max_len}")]
    PositionOverflow { position: usize, max_len: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Class,
    Size,
    Position,
    Epoch,
}

impl Slot {
    pub fn key(self) -> &'static str {
        match self {
            Slot::Class => "target",
            Slot::Size => "size",
            Slot::Position => "position",
            Slot::Epoch => "epoch",
        }
    }
}

/// Parameter slots a tool call must fill, in emission order.
pub fn tool_slots(tool: &str) -> &'static [Slot] {
    match tool {
        "res" => &[Slot::Class, Slot::Size, Slot::Position],
        "cd" => &[Slot::Epoch],
        _ => &[Slot::Class],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Eos,
    AnswerOpen,
    AnswerClose,
    Digit(u8),
    Punct(char),
    Label(u8),
    SceneWord(u8),
    Tool(String),
    Param(Slot, String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(
        class_table: &BTreeMap<u8, String>,
        tools: &ToolRegistry,
    ) -> Result<Self, PolicyError> {
        let mut entries: Vec<(String, TokenKind)> = vec![
            ("<eos>".into(), TokenKind::Eos),
            (ANSWER_OPEN.into(), TokenKind::AnswerOpen),
            (ANSWER_CLOSE.into(), TokenKind::AnswerClose),
        ];
        for d in 0..10u8 {
            entries.push((d.to_string(), TokenKind::Digit(d)));
        }
        for p in ['[', ']', ','] {
            entries.push((p.to_string(), TokenKind::Punct(p)));
        }
        for (&id, name) in class_table {
            entries.push((name.clone(), TokenKind::Label(id)));
        }
        for (&id, name) in class_table {
            entries.push((scene_type(name), TokenKind::SceneWord(id)));
        }
        for name in tools.names() {
            entries.push((format!("<{name}>"), TokenKind::Tool(name.to_string())));
        }
        for name in class_table.values() {
            entries.push((format!("@{name}"), TokenKind::Param(Slot::Class, name.clone())));
        }
        for w in SIZE_WORDS {
            entries.push((format!("@{w}"), TokenKind::Param(Slot::Size, w.to_string())));
        }
        for w in POSITION_WORDS {
            entries.push((format!("@{w}"), TokenKind::Param(Slot::Position, w.to_string())));
        }
        entries.push((format!("@{EPOCH_PARAM}"), TokenKind::Param(Slot::Epoch, EPOCH_PARAM.into())));

        let mut index = HashMap::new();
        for (i, (tok, _)) in entries.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(PolicyError::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        let (tokens, kinds) = entries.into_iter().unzip();
        Ok(Vocab { tokens, kinds, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn kind(&self, id: usize) -> &TokenKind {
        &self.kinds[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn answer_open(&self) -> usize {
        1
    }

    pub fn answer_close(&self) -> usize {
        2
    }

    pub fn tool_token(&self, tool: &str) -> Option<usize> {
        self.id(&format!("<{tool}>"))
    }

    pub fn param_token(&self, value: &str) -> Option<usize> {
        self.id(&format!("@{value}"))
    }

    pub fn is_word(&self, id: usize) -> bool {
        matches!(self.kinds[id], TokenKind::Label(_) | TokenKind::SceneWord(_))
    }

    /// Concatenates token text, with one space between consecutive words.
    pub fn render(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &t in tokens {
            if t == self.eos() {
                break;
            }
            let word = self.is_word(t);
            if word && prev_word {
                out.push(' ');
            }
            out.push_str(&self.tokens[t]);
            prev_word = word;
        }
        out
    }

    /// Tokenizes a canonical answer text (without tags).
    pub fn encode_answer_body(&self, text: &str) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        let mut chars = text.chars().peekable();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else if c.is_ascii_digit() || matches!(c, '[' | ']' | ',') {
                out.push(self.id(&c.to_string())?);
                chars.next();
            } else {
                let mut word = String::new();
                while let Some(&w) = chars.peek() {
                    if w.is_ascii_alphabetic() || w == '-' {
                        word.push(w);
                        chars.next();
                    } else {
                        break;
                    }
                }
                let id = self.id(&word)?;
                if !self.is_word(id) {
                    return None;
                }
                out.push(id);
            }
        }
        Some(out)
    }

    /// `<answer>`, the body tokens, `</answer>`, end of sequence.
    pub fn encode_answer(&self, text: &str) -> Option<Vec<usize>> {
        let mut out = vec![self.answer_open()];
        out.extend(self.encode_answer_body(text)?);
        out.push(self.answer_close());
        out.push(self.eos());
        Some(out)
    }

    fn hash_into(&self, h: &mut Sha256) {
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
    }
}

const STOPWORDS: [&str; 22] = [
    "a", "an", "the", "of", "by", "its", "it", "and", "or", "what", "them", "one", "with", "class",
    "scene", "object", "to", "in", "on", "for", "is", "are",
];

fn raw_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
}

/// Maps query text onto a fixed word list and scene statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    known: HashSet<String>,
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    class_table: BTreeMap<u8, String>,
    class_slots: BTreeMap<u8, usize>,
    tool_keywords: Vec<BTreeSet<String>>,
}

/// Start of each block inside the feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub bias: usize,
    pub words: usize,
    pub histogram: usize,
    pub presence: usize,
    pub mention: usize,
    pub affinity: usize,
    pub dim: usize,
}

impl Featurizer {
    pub fn new(class_table: &BTreeMap<u8, String>, tools: &ToolRegistry) -> Self {
        let mut known: HashSet<String> = HashSet::new();
        for task in TaskKind::ALL {
            for t in templates(task) {
                let stripped = t
                    .replace("{cs}", " ")
                    .replace("{c}", " ")
                    .replace("{size}", " ")
                    .replace("{pos}", " ");
                known.extend(raw_words(&stripped));
            }
        }
        for name in class_table.values() {
            known.insert(name.clone());
        }
        known.extend(SIZE_WORDS.iter().map(|w| w.to_string()));
        for p in POSITION_WORDS {
            known.extend(raw_words(p));
        }
        let mut featurizer = Featurizer {
            known,
            words: Vec::new(),
            word_index: HashMap::new(),
            class_table: class_table.clone(),
            class_slots: class_table.keys().enumerate().map(|(i, &c)| (c, i)).collect(),
            tool_keywords: Vec::new(),
        };
        let words: BTreeSet<String> =
            featurizer.known.iter().map(|w| featurizer.normalize(w)).collect();
        featurizer.words = words.into_iter().collect();
        featurizer.word_index =
            featurizer.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        featurizer.tool_keywords = tools
            .tools()
            .iter()
            .map(|t| {
                raw_words(&t.description)
                    .map(|w| featurizer.normalize(&w))
                    .filter(|w| !STOPWORDS.contains(&w.as_str()))
                    .collect()
            })
            .collect();
        featurizer
    }

    /// Lowercase word, with a plural `s` dropped when the singular is known.
    pub fn normalize(&self, word: &str) -> String {
        let w = word.to_ascii_lowercase();
        match w.strip_suffix('s') {
            Some(stem) if stem.len() >= 3 && self.known.contains(stem) => stem.to_string(),
            _ => w,
        }
    }

    pub fn query_words(&self, text: &str) -> BTreeSet<String> {
        raw_words(text).map(|w| self.normalize(&w)).collect()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    pub fn word_slot(&self, word: &str) -> Option<usize> {
        self.word_index.get(word).copied()
    }

    pub fn class_slot(&self, class_id: u8) -> Option<usize> {
        self.class_slots.get(&class_id).copied()
    }

    pub fn tool_count(&self) -> usize {
        self.tool_keywords.len()
    }

    pub fn layout(&self) -> FeatureLayout {
        let c = self.class_table.len();
        let words = 1;
        let histogram = words + self.words.len();
        let presence = histogram + c + 1;
        let mention = presence + c;
        let affinity = mention + MENTION_SLOTS;
        let dim = affinity + self.tool_keywords.len();
        FeatureLayout { bias: 0, words, histogram, presence, mention, affinity, dim }
    }

    /// Number of description keywords the query shares with each tool.
    pub fn tool_affinity(&self, query: &str) -> Vec<usize> {
        let words = self.query_words(query);
        self.tool_keywords.iter().map(|k| k.intersection(&words).count()).collect()
    }

    /// Class named in the query, by first match in class-id order.
    pub fn mentioned_class(&self, query: &str) -> Option<u8> {
        let words: BTreeSet<String> = raw_words(query).collect();
        self.class_table
            .iter()
            .find(|(_, name)| words.contains(*name) || words.contains(&plural(name)))
            .map(|(&id, _)| id)
    }

    pub fn featurize(&self, instance: &QueryInstance) -> Features {
        self.featurize_parts(&instance.query_text, &instance.scene)
    }

    pub fn featurize_parts(&self, query: &str, scene: &Scene) -> Features {
        let layout = self.layout();
        let mut nz: Vec<(usize, f64)> = vec![(layout.bias, 1.0)];
        for w in self.query_words(query) {
            if let Some(i) = self.word_slot(&w) {
                nz.push((layout.words + i, 1.0));
            }
        }
        let total = scene.raster_t0.len().max(1) as f64;
        let mut hist = vec![0usize; self.class_table.len() + 1];
        for &cell in &scene.raster_t0.cells {
            let slot = if cell == 0 { Some(0) } else { self.class_slot(cell).map(|s| s + 1) };
            if let Some(s) = slot {
                hist[s] += 1;
            }
        }
        if scene.objects_t0.is_empty() {
            hist.iter_mut().for_each(|h| *h = 0);
            hist[0] = scene.raster_t0.len().max(1);
        }
        for (i, &h) in hist.iter().enumerate() {
            if h > 0 {
                nz.push((layout.histogram + i, h as f64 / total));
            }
        }
        for (&c, &slot) in &self.class_slots {
            if scene.count_of(c) > 0 {
                nz.push((layout.presence + slot, 1.0));
            }
        }
        if let Some(c) = self.mentioned_class(query) {
            let count = (scene.count_of(c) as usize).min(MENTION_SLOTS - 1);
            nz.push((layout.mention + count, 1.0));
        }
        for (k, a) in self.tool_affinity(query).into_iter().enumerate() {
            if a > 0 {
                nz.push((layout.affinity + k, a as f64));
            }
        }
        nz.sort_by_key(|&(i, _)| i);
        Features { dim: layout.dim, nz }
    }

    fn hash_into(&self, h: &mut Sha256) {
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        for k in &self.tool_keywords {
            for w in k {
                h.update(w.as_bytes());
                h.update(b" ");
            }
            h.update(b"\n");
        }
    }
}

/// Sparse feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub nz: Vec<(usize, f64)>,
}

impl Features {
    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.nz {
            v[i] = x;
        }
        v
    }
}

/// Vocabulary, featurizer and input layout shared by all parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub vocab: Vocab,
    pub featurizer: Featurizer,
    pub max_len: usize,
}

impl PolicyModel {
    pub fn new(class_table: &BTreeMap<u8, String>, tools: &ToolRegistry) -> Result<Self, PolicyError> {
        Ok(PolicyModel {
            vocab: Vocab::new(class_table, tools)?,
            featurizer: Featurizer::new(class_table, tools),
            max_len: MAX_LEN,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.featurizer.layout().dim
    }

    pub fn bos_slot(&self) -> usize {
        self.vocab.len()
    }

    pub fn prev_offset(&self) -> usize {
        self.feature_dim()
    }

    pub fn position_offset(&self) -> usize {
        self.feature_dim() + self.vocab.len() + 1
    }

    pub fn input_dim(&self) -> usize {
        self.position_offset() + POSITION_DIM
    }

    pub fn featurize(&self, instance: &QueryInstance) -> Features {
        self.featurizer.featurize(instance)
    }

    /// Sparse input for the step at `position` following `prev` (None = start).
    pub fn context(
        &self,
        features: &Features,
        prev: Option<usize>,
        position: usize,
    ) -> Result<Vec<(usize, f64)>, PolicyError> {
        if position >= self.max_len {
            return Err(PolicyError::PositionOverflow { position, max_len: self.max_len });
        }
        let prev_slot = match prev {
            Some(t) if t < self.vocab.len() => t,
            Some(t) => return Err(PolicyError::UnknownToken(t)),
            None => self.bos_slot(),
        };
        let mut x = features.nz.clone();
        x.push((self.prev_offset() + prev_slot, 1.0));
        let off = self.position_offset();
        for k in 0..POSITION_DIM / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / POSITION_DIM as f64);
            let angle = position as f64 * freq;
            x.push((off + 2 * k, angle.sin()));
            x.push((off + 2 * k + 1, angle.cos()));
        }
        Ok(x)
    }

    /// Hash of every symbol table a checkpoint depends on.
    pub fn vocab_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.vocab.hash_into(&mut h);
        h.update(b"--\n");
        self.featurizer.hash_into(&mut h);
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub vocab_size: usize,
    pub input_dim: usize,
    /// Column-major: weight of input `j` on token `v` is `w[j * vocab_size + v]`.
    pub w: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(model: &PolicyModel) -> Self {
        let (v, d) = (model.vocab.len(), model.input_dim());
        PolicyParams { vocab_size: v, input_dim: d, w: vec![0.0; v * d] }
    }

    /// Weights uniform in `(-scale, scale)`.
    pub fn random(model: &PolicyModel, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.w {
            *w = rng.gen_range(-scale..scale);
        }
        p
    }

    pub fn get(&self, input: usize, token: usize) -> f64 {
        self.w[input * self.vocab_size + token]
    }

    pub fn add(&mut self, input: usize, token: usize, value: f64) {
        self.w[input * self.vocab_size + token] += value;
    }

    pub fn logits(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut out = vec![0.0; v];
        for &(j, xj) in x {
            let col = &self.w[j * v..(j + 1) * v];
            for (o, &w) in out.iter_mut().zip(col) {
                *o += w * xj;
            }
        }
        out
    }

    /// Adds `scale · g ⊗ x` where `g` is a gradient with respect to the logits.
    pub fn accumulate(&mut self, x: &[(usize, f64)], g: &[f64], scale: f64) {
        let v = self.vocab_size;
        for &(j, xj) in x {
            let col = &mut self.w[j * v..(j + 1) * v];
            let s = scale * xj;
            for (c, &gv) in col.iter_mut().zip(g) {
                *c += s * gv;
            }
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|w| w.is_finite())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}

/// Exact `KL(p‖q)` from log-distributions.
pub fn categorical_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum::<f64>().max(0.0)
}

/// Log-distribution over the vocabulary at one step.
pub fn logprob_step(
    model: &PolicyModel,
    params: &PolicyParams,
    features: &Features,
    prefix: &[usize],
    position: usize,
) -> Result<Vec<f64>, PolicyError> {
    let x = model.context(features, prefix.last().copied(), position)?;
    Ok(log_softmax(&params.logits(&x)))
}

pub fn clamp_logprob(lp: f64) -> f64 {
    lp.max(LOGPROB_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Clamped log-probability of each token at temperature 1.
    pub logprobs: Vec<f64>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Samples until end of sequence or the length cap.
pub fn sample_sequence<R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams,
    features: &Features,
    temperature: f64,
    rng: &mut R,
) -> Sample {
    assert!(temperature > 0.0, "temperature must be positive");
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    for pos in 0..model.max_len {
        let x = model
            .context(features, tokens.last().copied(), pos)
            .expect("positions stay below max_len");
        let logits = params.logits(&x);
        let probs = softmax_scaled(&logits, temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut tok = argmax(&probs);
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = i;
                break;
            }
        }
        logprobs.push(clamp_logprob(log_softmax(&logits)[tok]));
        tokens.push(tok);
        if tok == model.vocab.eos() {
            break;
        }
    }
    Sample { tokens, logprobs }
}

/// Argmax decoding.
pub fn greedy_decode(model: &PolicyModel, params: &PolicyParams, features: &Features) -> Vec<usize> {
    let mut tokens = Vec::new();
    for pos in 0..model.max_len {
        let x = model
            .context(features, tokens.last().copied(), pos)
            .expect("positions stay below max_len");
        let tok = argmax(&params.logits(&x));
        tokens.push(tok);
        if tok == model.vocab.eos() {
            break;
        }
    }
    tokens
}

/// Gradient of `Σ_t log π(o_t | s_t)`, added into `grad` with weight `scale`.
pub fn accumulate_grad_logprob(
    model: &PolicyModel,
    params: &PolicyParams,
    features: &Features,
    sequence: &[usize],
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<(), PolicyError> {
    for (t, &tok) in sequence.iter().enumerate() {
        if tok >= model.vocab.len() {
            return Err(PolicyError::UnknownToken(tok));
        }
        let prev = if t == 0 { None } else { Some(sequence[t - 1]) };
        let x = model.context(features, prev, t)?;
        let logp = log_softmax(&params.logits(&x));
        if logp[tok] < LOGPROB_FLOOR {
            continue;
        }
        let mut g: Vec<f64> = logp.iter().map(|lp| -lp.exp()).collect();
        g[tok] += 1.0;
        grad.accumulate(&x, &g, scale);
    }
    Ok(())
}

pub fn grad_logprob(
    model: &PolicyModel,
    params: &PolicyParams,
    features: &Features,
    sequence: &[usize],
) -> Result<PolicyParams, PolicyError> {
    let mut grad = PolicyParams::zeros(model);
    accumulate_grad_logprob(model, params, features, sequence, 1.0, &mut grad)?;
    Ok(grad)
}

pub fn sequence_logprob(
    model: &PolicyModel,
    params: &PolicyParams,
    features: &Features,
    sequence: &[usize],
) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for (t, &tok) in sequence.iter().enumerate() {
        let logp = logprob_step(model, params, features, &sequence[..t], t)?;
        total += clamp_logprob(*logp.get(tok).ok_or(PolicyError::UnknownToken(tok))?);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshots {
    pub active: PolicyParams,
    pub behavior: PolicyParams,
    reference: PolicyParams,
}

impl PolicySnapshots {
    /// Freezes `initial` as the reference.
    pub fn new(initial: PolicyParams) -> Self {
        PolicySnapshots { active: initial.clone(), behavior: initial.clone(), reference: initial }
    }

    pub fn from_parts(active: PolicyParams, reference: PolicyParams) -> Self {
        PolicySnapshots { behavior: active.clone(), active, reference }
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn sync_behavior(&mut self) {
        self.behavior.clone_from(&self.active);
    }
}

/// Constants of the hand-set starting policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    /// Logit for every continuation the output grammar allows.
    pub grammar: f64,
    /// Logit removed from every continuation it does not allow.
    pub ungrammatical: f64,
    /// Extra logit for opening an answer at the first step.
    pub answer_bias: f64,
    /// Extra first-step logits for each tool, in registry order.
    pub tool_bias: Vec<f64>,
    /// Weight from each shared description keyword to the tool token.
    pub affinity: f64,
    /// Weight from a query word to the parameter token it names.
    pub param: f64,
    /// Preference for ending a tool call after the class slot.
    pub short_call: f64,
    /// Weight from a tool's affinity to the values of its later slots.
    pub slot_affinity: f64,
    /// Extra logit for closing an answer after a digit or a label.
    pub close_bias: f64,
    /// Weight from a class's area share to its scene word.
    pub scene_word: f64,
    /// Weight from class presence to its label word.
    pub label: f64,
    /// Weight from the mentioned-class count to the matching digit.
    pub count: f64,
    /// Half-width of the uniform noise added to every weight.
    pub noise: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            grammar: 6.0,
            ungrammatical: 40.0,
            answer_bias: 2.0,
            tool_bias: vec![3.0, 2.6, 2.4, 2.2, 2.0],
            affinity: 5.0,
            param: 4.0,
            short_call: 3.0,
            slot_affinity: 2.0,
            close_bias: 5.0,
            scene_word: 100.0,
            label: 3.0,
            count: 4.0,
            noise: 0.01,
        }
    }
}

/// Starting policy: a bigram output grammar, a bias towards calling tools,
/// tool selection from description keywords, and coarse perception priors.
pub fn base_policy(model: &PolicyModel, cfg: &PriorConfig, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::random(model, seed, cfg.noise);
    let vocab = &model.vocab;
    let layout = model.featurizer.layout();
    let prev = |t: usize| model.prev_offset() + t;
    let bos = prev(model.bos_slot());
    let g = cfg.grammar;

    let ids_where = |f: &dyn Fn(&TokenKind) -> bool| -> Vec<usize> {
        (0..vocab.len()).filter(|&i| f(vocab.kind(i))).collect()
    };
    let digits = ids_where(&|k| matches!(k, TokenKind::Digit(_)));
    let labels = ids_where(&|k| matches!(k, TokenKind::Label(_)));
    let scene_words = ids_where(&|k| matches!(k, TokenKind::SceneWord(_)));
    let tools = ids_where(&|k| matches!(k, TokenKind::Tool(_)));
    let slot_tokens =
        |slot: Slot| ids_where(&|k| matches!(k, TokenKind::Param(s, _) if *s == slot));
    let punct = |c: char| vocab.id(&c.to_string()).expect("punctuation tokens exist");
    let (open, close, eos) = (vocab.answer_open(), vocab.answer_close(), vocab.eos());
    let (lbr, rbr, comma) = (punct('['), punct(']'), punct(','));

    // Output grammar. Every transition it does not list is penalized, so
    // query-level features cannot pull tokens into the wrong place.
    let mut allowed = vec![false; model.input_dim() * vocab.len()];
    let mut allow = |p: &mut PolicyParams, input: usize, token: usize, value: f64| {
        allowed[input * vocab.len() + token] = true;
        p.add(input, token, value);
    };
    allow(&mut p, bos, open, g + cfg.answer_bias);
    for (k, &t) in tools.iter().enumerate() {
        allow(&mut p, bos, t, g + cfg.tool_bias.get(k).copied().unwrap_or(0.0));
    }
    for &t in digits.iter().chain(&labels).chain(&scene_words).chain([&lbr]) {
        allow(&mut p, prev(open), t, g);
    }
    for &d in &digits {
        for &t in digits.iter().chain([&comma, &rbr, &close]) {
            allow(&mut p, prev(d), t, g);
        }
        allow(&mut p, prev(d), close, cfg.close_bias);
        allow(&mut p, prev(lbr), d, g);
        allow(&mut p, prev(comma), d, g);
    }
    allow(&mut p, prev(comma), lbr, g);
    for &l in &labels {
        allow(&mut p, prev(comma), l, g);
        allow(&mut p, prev(l), comma, g);
        allow(&mut p, prev(l), close, g + cfg.close_bias);
    }
    for &s in &scene_words {
        allow(&mut p, prev(s), close, g);
    }
    allow(&mut p, prev(rbr), comma, g);
    allow(&mut p, prev(rbr), close, g);
    allow(&mut p, prev(close), eos, g);

    let classes = slot_tokens(Slot::Class);
    let sizes = slot_tokens(Slot::Size);
    let positions = slot_tokens(Slot::Position);
    let epochs = slot_tokens(Slot::Epoch);
    for &t in &tools {
        let TokenKind::Tool(name) = vocab.kind(t) else { continue };
        let first: &[usize] = match tool_slots(name).first() {
            Some(Slot::Epoch) => &epochs,
            _ => &classes,
        };
        for &f in first {
            allow(&mut p, prev(t), f, g);
        }
    }
    for &c in &classes {
        allow(&mut p, prev(c), eos, g + cfg.short_call);
        for &s in &sizes {
            allow(&mut p, prev(c), s, g);
        }
    }
    for &s in &sizes {
        for &q in &positions {
            allow(&mut p, prev(s), q, g);
        }
    }
    for &t in positions.iter().chain(&epochs) {
        allow(&mut p, prev(t), eos, g);
    }

    for slot in 0..=model.bos_slot() {
        for t in 0..vocab.len() {
            if !allowed[prev(slot) * vocab.len() + t] {
                p.add(prev(slot), t, -cfg.ungrammatical);
            }
        }
    }

    // Tool choice from description keywords.
    for (k, &t) in tools.iter().enumerate() {
        p.add(layout.affinity + k, t, cfg.affinity);
        let TokenKind::Tool(name) = vocab.kind(t) else { continue };
        for &slot in tool_slots(name).iter().skip(1) {
            for v in slot_tokens(slot) {
                p.add(layout.affinity + k, v, cfg.slot_affinity);
            }
        }
    }

    // Parameter words.
    let word = |w: &str| model.featurizer.word_slot(w).map(|i| layout.words + i);
    for &t in classes.iter().chain(&sizes) {
        let TokenKind::Param(_, value) = vocab.kind(t) else { continue };
        if let Some(j) = word(value) {
            p.add(j, t, cfg.param);
        }
    }
    for &t in &positions {
        let TokenKind::Param(_, value) = vocab.kind(t) else { continue };
        for part in value.split('-') {
            if let Some(j) = word(part) {
                p.add(j, t, cfg.param / 2.0);
            }
        }
    }

    // Perception.
    for &t in labels.iter().chain(&scene_words) {
        let (TokenKind::Label(c) | TokenKind::SceneWord(c)) = *vocab.kind(t) else { continue };
        let Some(slot) = model.featurizer.class_slot(c) else { continue };
        if matches!(vocab.kind(t), TokenKind::Label(_)) {
            p.add(layout.presence + slot, t, cfg.label);
        } else {
            p.add(layout.histogram + 1 + slot, t, cfg.scene_word);
        }
    }
    for (n, &d) in digits.iter().enumerate().take(MENTION_SLOTS) {
        p.add(layout.mention + n, d, cfg.count);
    }
    p
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PolicyError::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128, PolicyError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PolicyError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| PolicyError::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub snapshots: PolicySnapshots,
    pub rng: ChaCha8Rng,
}

pub fn encode_checkpoint(model: &PolicyModel, ckpt: &Checkpoint) -> Vec<u8> {
    let s = &ckpt.snapshots;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&model.vocab_hash());
    put_u32(&mut out, model.feature_dim() as u32);
    put_u32(&mut out, model.vocab.len() as u32);
    put_u32(&mut out, model.input_dim() as u32);
    put_u32(&mut out, model.max_len as u32);
    for params in [&s.active, s.reference()] {
        for w in &params.w {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out.extend_from_slice(&ckpt.rng.get_seed());
    put_u64(&mut out, ckpt.rng.get_stream());
    out.extend_from_slice(&ckpt.rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_checkpoint(model: &PolicyModel, bytes: &[u8]) -> Result<Checkpoint, PolicyError> {
    let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
    let mut r = ByteReader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::Checkpoint(format!("unsupported format version {version}")));
    }
    if r.take(32)? != model.vocab_hash() {
        return Err(bad("vocabulary hash does not match this model"));
    }
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let expected =
        [model.feature_dim(), model.vocab.len(), model.input_dim(), model.max_len].map(|d| d as u32);
    if dims != expected {
        return Err(PolicyError::Checkpoint(format!("dimensions {dims:?}, expected {expected:?}")));
    }
    let n = model.vocab.len() * model.input_dim();
    let make = |r: &mut ByteReader| -> Result<PolicyParams, PolicyError> {
        let w = r.f64s(n)?;
        Ok(PolicyParams { vocab_size: model.vocab.len(), input_dim: model.input_dim(), w })
    };
    let active = make(&mut r)?;
    let reference = make(&mut r)?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    if !active.is_finite() || !reference.is_finite() {
        return Err(bad("non-finite weights"));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(Checkpoint { snapshots: PolicySnapshots::from_parts(active, reference), rng })
}

pub fn save_checkpoint(model: &PolicyModel, ckpt: &Checkpoint, path: &Path) -> Result<(), PolicyError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model, ckpt))?;
    Ok(())
}

pub fn load_checkpoint(model: &PolicyModel, path: &Path) -> Result<Checkpoint, PolicyError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(model, &bytes)
}
