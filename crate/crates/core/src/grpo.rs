//! Group relative policy optimization.
//!
//! Each training instance gets a group of sampled outputs from the behavior
//! policy. Rewards are standardized within the group and the resulting
//! advantage is applied to every token of the output. The active policy then
//! ascends a clipped surrogate minus a KL penalty towards the reference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    categorical_kl, clamp_logprob, greedy_decode, log_softmax, sample_sequence, Features, PolicyModel,
    PolicyParams, PolicySnapshots, LOGPROB_FLOOR,
};
use crate::reward::{dispatch_reward, render_answer, Branch};
use crate::router::evaluate_intent;
use crate::vagueeo::{derive_seed, QueryInstance};

pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    /// Passes over the training split.
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradient steps taken on each sampled batch before the next sync.
    pub updates_per_batch: usize,
    /// Evaluate the probe set every this many iterations (0 = never).
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GrpoConfig {
    pub fn desk() -> Self {
        GrpoConfig {
            group_size: 4,
            clip_eps: 0.2,
            kl_coef: 0.04,
            temperature: 0.95,
            learning_rate: 0.2,
            epochs: 15,
            batch_size: 25,
            updates_per_batch: 1,
            probe_every: 25,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        GrpoConfig { learning_rate: 1e-6, epochs: 24, batch_size: 32, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad("kl_coef must be a finite non-negative number");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if self.batch_size == 0 || self.updates_per_batch == 0 {
            return bad("batch_size and updates_per_batch must be positive");
        }
        Ok(())
    }

    pub fn iterations(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size) * self.epochs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// Clamped log-probabilities under the behavior policy.
    pub behavior_logprobs: Vec<f64>,
    pub reward: f64,
    pub branch: Branch,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub instance_id: String,
    pub rollouts: Vec<Rollout>,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Advantage of every token of rollout `i`.
    pub fn token_advantages(&self, i: usize) -> Vec<f64> {
        vec![self.advantages[i]; self.rollouts[i].len()]
    }
}

/// Group-standardized advantages using the population standard deviation.
pub fn normalize_advantages(rewards: &[f64]) -> Result<(f64, f64, Vec<f64>), GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::Config("a group needs at least two rewards".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let adv = if std < SIGMA_FLOOR {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok((mean, std, adv))
}

/// Reference answer text for a training instance.
pub fn ground_truth_text(instance: &QueryInstance) -> Result<String, GrpoError> {
    render_answer(&instance.ground_truth).ok_or_else(|| {
        GrpoError::Data(format!("{}: {} has no textual answer", instance.id, instance.task))
    })
}

/// Scores a rendered output against a reference answer.
pub fn score_tokens(model: &PolicyModel, tokens: &[usize], gt_text: &str) -> (f64, Branch) {
    let text = model.vocab.render(tokens);
    match dispatch_reward(&text, gt_text) {
        Ok(r) => (r.value, r.branch),
        Err(_) => (0.0, Branch::Invalid),
    }
}

/// Samples `group_size` outputs from the behavior policy, one RNG per rollout.
pub fn sample_group(
    model: &PolicyModel,
    snapshots: &PolicySnapshots,
    instance_id: &str,
    features: &Features,
    gt_text: &str,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<RolloutGroup, GrpoError> {
    if cfg.group_size < 2 {
        return Err(GrpoError::Config("group_size must be at least 2".into()));
    }
    let rollouts: Vec<Rollout> = (0..cfg.group_size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            let s = sample_sequence(model, &snapshots.behavior, features, cfg.temperature, &mut rng);
            let (reward, branch) = score_tokens(model, &s.tokens, gt_text);
            Rollout { tokens: s.tokens, behavior_logprobs: s.logprobs, reward, branch }
        })
        .collect();
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
    let (mean_reward, std_reward, advantages) = normalize_advantages(&rewards)?;
    Ok(RolloutGroup {
        instance_id: instance_id.to_string(),
        rollouts,
        mean_reward,
        std_reward,
        advantages,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub surrogate: f64,
    pub kl: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    /// Mean per-token KL, unweighted by sequence length.
    pub mean_token_kl: f64,
    pub tokens: usize,
}

/// Per-token clipped surrogate and its derivative with respect to the
/// active log-probability. The flag reports whether the clip was binding.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if clipped < unclipped {
        (clipped, 0.0, true)
    } else {
        (unclipped, unclipped, false)
    }
}

/// Objective of one group and its gradient with respect to the active weights.
pub fn group_objective(
    model: &PolicyModel,
    snapshots: &PolicySnapshots,
    features: &Features,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    grad: &mut PolicyParams,
    weight: f64,
) -> ObjectiveReport {
    let n = group.rollouts.len() as f64;
    let mut report = ObjectiveReport::default();
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut token_kl_sum = 0.0;
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let t_len = rollout.len();
        if t_len == 0 {
            continue;
        }
        let adv = group.advantages[i];
        let scale = weight / (n * t_len as f64);
        for (t, &tok) in rollout.tokens.iter().enumerate() {
            let prev = if t == 0 { None } else { Some(rollout.tokens[t - 1]) };
            let x = model.context(features, prev, t).expect("rollouts respect max_len");
            let la = log_softmax(&snapshots.active.logits(&x));
            let lr = log_softmax(&snapshots.reference().logits(&x));
            let lp = clamp_logprob(la[tok]);
            let ratio = (lp - rollout.behavior_logprobs[t]).exp();
            let (surr, d_surr, binding) = clipped_surrogate(ratio, adv, cfg.clip_eps);
            let kl = categorical_kl(&la, &lr);
            report.surrogate += scale * surr;
            report.kl += scale * kl;
            ratio_sum += ratio;
            token_kl_sum += kl;
            clipped += binding as usize;
            report.tokens += 1;

            let d_lp = if la[tok] < LOGPROB_FLOOR { 0.0 } else { d_surr };
            let mut g = vec![0.0; la.len()];
            for (j, gj) in g.iter_mut().enumerate() {
                let p = la[j].exp();
                let one = if j == tok { 1.0 } else { 0.0 };
                *gj = d_lp * (one - p) - cfg.kl_coef * p * (la[j] - lr[j] - kl);
            }
            grad.accumulate(&x, &g, scale);
        }
    }
    report.total = report.surrogate - cfg.kl_coef * report.kl;
    if report.tokens > 0 {
        report.clip_fraction = clipped as f64 / report.tokens as f64;
        report.mean_ratio = ratio_sum / report.tokens as f64;
        report.mean_token_kl = token_kl_sum / report.tokens as f64;
    }
    report
}

fn merge(reports: &[ObjectiveReport]) -> ObjectiveReport {
    let tokens: usize = reports.iter().map(|r| r.tokens).sum();
    let tw = |f: fn(&ObjectiveReport) -> f64| {
        if tokens == 0 {
            0.0
        } else {
            reports.iter().map(|r| f(r) * r.tokens as f64).sum::<f64>() / tokens as f64
        }
    };
    ObjectiveReport {
        surrogate: reports.iter().map(|r| r.surrogate).sum(),
        kl: reports.iter().map(|r| r.kl).sum(),
        total: reports.iter().map(|r| r.total).sum(),
        clip_fraction: tw(|r| r.clip_fraction),
        mean_ratio: tw(|r| r.mean_ratio),
        mean_token_kl: tw(|r| r.mean_token_kl),
        tokens,
    }
}

/// Batch objective `J` (mean over groups) and its gradient.
pub fn grpo_objective(
    model: &PolicyModel,
    snapshots: &PolicySnapshots,
    batch: &[(&Features, &RolloutGroup)],
    cfg: &GrpoConfig,
) -> (ObjectiveReport, PolicyParams) {
    let weight = 1.0 / batch.len().max(1) as f64;
    let parts: Vec<(ObjectiveReport, PolicyParams)> = batch
        .par_iter()
        .map(|(f, g)| {
            let mut grad = PolicyParams::zeros(model);
            let r = group_objective(model, snapshots, f, g, cfg, &mut grad, weight);
            (r, grad)
        })
        .collect();
    let mut grad = PolicyParams::zeros(model);
    for (_, g) in &parts {
        grad.axpy(1.0, g);
    }
    let reports: Vec<ObjectiveReport> = parts.into_iter().map(|(r, _)| r).collect();
    (merge(&reports), grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub intent_accuracy_on_probe: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mean_reward,clip_fraction,mean_kl,intent_accuracy_on_probe\n");
        for r in &self.rows {
            let probe = r.intent_accuracy_on_probe.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.8},{}\n",
                r.iteration, r.mean_reward, r.clip_fraction, r.mean_kl, probe
            ));
        }
        out
    }

    pub fn final_kl(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_kl)
    }

    /// Trailing moving average of the mean reward.
    pub fn reward_moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.rows.iter().map(|r| r.mean_reward).collect::<Vec<_>>(), window)
    }
}

pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Mean per-token KL(active ‖ reference) along the active policy's greedy
/// decodes of `features`.
pub fn mean_kl_to_reference(model: &PolicyModel, snapshots: &PolicySnapshots, features: &[Features]) -> f64 {
    let per: Vec<(f64, usize)> = features
        .par_iter()
        .map(|f| {
            let tokens = greedy_decode(model, &snapshots.active, f);
            let mut total = 0.0;
            for t in 0..tokens.len() {
                let prev = if t == 0 { None } else { Some(tokens[t - 1]) };
                let x = model.context(f, prev, t).expect("decodes respect max_len");
                let la = log_softmax(&snapshots.active.logits(&x));
                let lr = log_softmax(&snapshots.reference().logits(&x));
                total += categorical_kl(&la, &lr);
            }
            (total, tokens.len())
        })
        .collect();
    let tokens: usize = per.iter().map(|p| p.1).sum();
    per.iter().map(|p| p.0).sum::<f64>() / tokens.max(1) as f64
}

pub struct TrainOutcome {
    pub snapshots: PolicySnapshots,
    pub log: TrainingLog,
    pub rng: ChaCha8Rng,
}

/// Prepared training split: features and reference texts per instance.
pub struct TrainingSet<'a> {
    pub instances: &'a [QueryInstance],
    pub features: Vec<Features>,
    pub answers: Vec<String>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(model: &PolicyModel, instances: &'a [QueryInstance]) -> Result<Self, GrpoError> {
        if instances.is_empty() {
            return Err(GrpoError::Data("the training split is empty".into()));
        }
        if let Some(q) = instances.iter().find(|q| !q.task.is_intrinsic()) {
            return Err(GrpoError::Data(format!("{} is not an intrinsic task", q.id)));
        }
        let features = instances.par_iter().map(|q| model.featurize(q)).collect();
        let answers = instances.iter().map(ground_truth_text).collect::<Result<_, _>>()?;
        Ok(TrainingSet { instances, features, answers })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Shuffled index batches covering the split once per epoch.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn train(
    model: &PolicyModel,
    data: &TrainingSet,
    mut snapshots: PolicySnapshots,
    cfg: &GrpoConfig,
    probe: &[QueryInstance],
) -> Result<TrainOutcome, GrpoError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            snapshots.sync_behavior();
            let groups: Vec<RolloutGroup> = batch
                .par_iter()
                .enumerate()
                .map(|(b, &idx)| {
                    let seed = derive_seed(&[cfg.seed, iteration as u64, b as u64]);
                    let q = &data.instances[idx];
                    sample_group(model, &snapshots, &q.id, &data.features[idx], &data.answers[idx], cfg, seed)
                })
                .collect::<Result<_, _>>()?;
            let pairs: Vec<(&Features, &RolloutGroup)> =
                batch.iter().zip(&groups).map(|(&i, g)| (&data.features[i], g)).collect();
            let mut first: Option<ObjectiveReport> = None;
            for _ in 0..cfg.updates_per_batch {
                let (report, grad) = grpo_objective(model, &snapshots, &pairs, cfg);
                first.get_or_insert(report);
                if cfg.learning_rate != 0.0 {
                    snapshots.active.axpy(cfg.learning_rate, &grad);
                }
            }
            let report = first.unwrap_or_default();
            let rewards: Vec<f64> =
                groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.reward)).collect();
            iteration += 1;
            let probe_acc = (cfg.probe_every > 0 && !probe.is_empty() && iteration % cfg.probe_every == 0)
                .then(|| evaluate_intent(model, &snapshots.active, probe).mean);
            log.rows.push(LogRow {
                iteration,
                mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
                clip_fraction: report.clip_fraction,
                mean_kl: report.mean_token_kl,
                intent_accuracy_on_probe: probe_acc,
            });
        }
    }
    Ok(TrainOutcome { snapshots, log, rng })
}
