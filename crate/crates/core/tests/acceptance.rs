//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use georouter::grpo::{
    ground_truth_text, grpo_objective, mean_kl_to_reference, normalize_advantages, sample_group, train,
    GrpoConfig, RolloutGroup, TrainingSet,
};
use georouter::mcp::{serve, McpClient, ServerHandle, ToolRegistry, ToolServer};
use georouter::metrics::{score_trace, train_sft_baseline};
use georouter::policy::{base_policy, Features, PolicyModel, PolicyParams, PolicySnapshots, PriorConfig};
use georouter::reward::{iou, reward_coord, reward_num, reward_text, BoxCoords};
use georouter::router::{evaluate_intent, react_baseline, route, RouteTrace};
use georouter::vagueeo::{build_dataset, Dataset, DatasetConfig, QueryInstance, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxCoords {
    let x1 = rng.gen_range(0.0..24.0);
    let y1 = rng.gen_range(0.0..24.0);
    [x1, y1, x1 + rng.gen_range(0.5..8.0), y1 + rng.gen_range(0.5..8.0)]
}

/// Best total IoU over every partial injection of the smaller set.
fn brute_force_total(gt: &[BoxCoords], pred: &[BoxCoords]) -> f64 {
    fn go(gt: &[BoxCoords], pred: &[BoxCoords], row: usize, used: &mut [bool]) -> f64 {
        if row == gt.len() {
            return 0.0;
        }
        let mut best = go(gt, pred, row + 1, used);
        for j in 0..pred.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(iou(&gt[row], &pred[j]) + go(gt, pred, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(gt, pred, 0, &mut vec![false; pred.len()])
}

fn hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let gt: Vec<BoxCoords> = (0..rng.gen_range(1..=6)).map(|_| random_box(&mut rng)).collect();
        let pred: Vec<BoxCoords> = (0..rng.gen_range(1..=6)).map(|_| random_box(&mut rng)).collect();
        let expected = (brute_force_total(&gt, &pred) / gt.len() as f64).clamp(0.0, 1.0);
        worst = worst.max((reward_coord(&pred, &gt).value - expected).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-12 && secs < 10.0, format!("max |err| {worst:.1e}, {secs:.2}s"))
}

fn num_reward_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..1000 {
        let g: f64 = rng.gen_range(1.0..50.0);
        if reward_num(g, g).value != 1.0 {
            failures += 1;
        }
        let far = g * rng.gen_range(1.5001..4.0);
        if reward_num(far, g).value != 0.0 || reward_num(g - (far - g), g).value != 0.0 {
            failures += 1;
        }
        let p = rng.gen_range(0.1..50.0);
        if reward_num(p, 0.0).value != 0.0 {
            failures += 1;
        }
        let d1 = rng.gen_range(1e-6..0.5) * g;
        let d2 = rng.gen_range(1e-6..0.5) * g;
        let (near, far) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let r_near = reward_num(g + near, g).value;
        if (r_near - (-3.0 * near / g).exp()).abs() > 1e-12 {
            failures += 1;
        }
        if reward_num(g - far, g).value > r_near {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} violations over 1000 cases"))
}

fn text_reward_branches() -> Outcome {
    let universe = ["water", "forest", "road", "building", "farmland", "plane"];
    let subset = |mask: u32| -> BTreeSet<String> {
        (0..6).filter(|i| mask & (1 << i) != 0).map(|i| universe[i].to_string()).collect()
    };
    let mut checked = 0;
    let mut failures = 0;
    for g in 0..64u32 {
        for p in 0..64u32 {
            let (gs, ps) = (subset(g), subset(p));
            let expected = if g == 0 {
                0.0
            } else if g & p == g {
                1.0
            } else {
                (g & p).count_ones() as f64 / g.count_ones() as f64
            };
            checked += 1;
            if reward_text(&ps, &gs).value != expected {
                failures += 1;
            }
        }
    }
    outcome(failures == 0, format!("{failures} mismatches over {checked} subset pairs"))
}

fn setup(dataset: &Dataset) -> PolicyModel {
    PolicyModel::new(&dataset.train[0].scene.class_table, &ToolRegistry::default()).unwrap()
}

fn groups_for(
    model: &PolicyModel,
    snaps: &PolicySnapshots,
    instances: &[QueryInstance],
    cfg: &GrpoConfig,
    seed: u64,
) -> (Vec<Features>, Vec<RolloutGroup>) {
    let feats: Vec<Features> = instances.iter().map(|q| model.featurize(q)).collect();
    let groups = instances
        .iter()
        .zip(&feats)
        .enumerate()
        .map(|(i, (q, f))| {
            sample_group(model, snaps, &q.id, f, &ground_truth_text(q).unwrap(), cfg, seed + i as u64).unwrap()
        })
        .collect();
    (feats, groups)
}

fn advantage_standardization(dataset: &Dataset, model: &PolicyModel) -> Outcome {
    let snaps = PolicySnapshots::new(base_policy(model, &PriorConfig::default(), 0));
    let cfg = GrpoConfig::desk();
    let (_, groups) = groups_for(model, &snaps, &dataset.train, &cfg, 0);
    let (mut spread, mut flat, mut failures) = (0, 0, 0);
    for g in &groups {
        let rewards: Vec<f64> = g.rollouts.iter().map(|r| r.reward).collect();
        let (_, sigma, adv) = normalize_advantages(&rewards).unwrap();
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        if rewards.iter().all(|&r| r == rewards[0]) {
            flat += 1;
            if adv.iter().any(|&a| a != 0.0) {
                failures += 1;
            }
        } else if sigma > 1e-8 {
            spread += 1;
            if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-9 {
                failures += 1;
            }
        }
        if adv != g.advantages {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{spread} spread groups, {flat} flat groups, {failures} violations"))
}

fn gradient_check(dataset: &Dataset, model: &PolicyModel) -> Outcome {
    let start = Instant::now();
    let mut snaps = PolicySnapshots::new(base_policy(model, &PriorConfig::default(), 0));
    let cfg = GrpoConfig { group_size: 4, kl_coef: 0.5, ..GrpoConfig::desk() };
    let batch: Vec<QueryInstance> = [0, 150].iter().map(|&i| dataset.train[i].clone()).collect();
    let (feats, groups) = groups_for(model, &snaps, &batch, &cfg, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for w in snaps.active.w.iter_mut() {
        *w += rng.gen_range(-0.02..0.02);
    }
    let pairs: Vec<_> = feats.iter().zip(&groups).collect();
    let (_, grad) = grpo_objective(model, &snaps, &pairs, &cfg);
    // Central differences at this step resolve roughly 1e-11; coordinates far
    // below that (mostly exactly zero) carry no signal for either side.
    let live: Vec<usize> = (0..grad.w.len()).filter(|&k| grad.w[k].abs() >= 1e-6).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = live[rng.gen_range(0..live.len())];
        let eval = |delta: f64| {
            let mut s = snaps.clone();
            s.active.w[k] += delta;
            grpo_objective(model, &s, &pairs, &cfg).0.total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - grad.w[k]).abs() / fd.abs().max(grad.w[k].abs());
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 30.0,
        format!("max rel err {worst:.2e} over 50 of {} coordinates with |g| >= 1e-6, {secs:.2}s", live.len()),
    )
}

fn kl_penalty(dataset: &Dataset, model: &PolicyModel) -> Outcome {
    let start = Instant::now();
    let data = TrainingSet::new(model, &dataset.train).unwrap();
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let init = PolicySnapshots::new(base_policy(model, &PriorConfig::default(), seed));
        let kl = |beta: f64| {
            let cfg = GrpoConfig { seed, kl_coef: beta, ..GrpoConfig::desk() };
            let out = train(model, &data, init.clone(), &cfg, &[]).unwrap();
            mean_kl_to_reference(model, &out.snapshots, &data.features)
        };
        let (strong, free) = (kl(10.0), kl(0.0));
        pass &= strong <= free;
        rows.push(format!("seed {seed}: {strong:.2e} vs {free:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 120.0, format!("KL beta=10 vs beta=0, {}; {secs:.1}s", rows.join("; ")))
}

struct Trained {
    grpo: PolicyParams,
    sft: PolicyParams,
    untrained: PolicyParams,
    iterations: usize,
    grpo_secs: f64,
}

fn train_both(dataset: &Dataset, model: &PolicyModel) -> Trained {
    let data = TrainingSet::new(model, &dataset.train).unwrap();
    let init = PolicySnapshots::new(base_policy(model, &PriorConfig::default(), 0));
    let cfg = GrpoConfig { seed: 0, ..GrpoConfig::desk() };
    let start = Instant::now();
    let rl = train(model, &data, init.clone(), &cfg, &[]).unwrap();
    let grpo_secs = start.elapsed().as_secs_f64();
    let sft = train_sft_baseline(model, &data, init.clone(), &cfg).unwrap();
    Trained {
        grpo: rl.snapshots.active,
        sft: sft.snapshots.active,
        untrained: init.active,
        iterations: rl.log.rows.len(),
        grpo_secs,
    }
}

fn intent_recognition(dataset: &Dataset, model: &PolicyModel, t: &Trained) -> Outcome {
    let trained = evaluate_intent(model, &t.grpo, &dataset.test);
    let untrained = evaluate_intent(model, &t.untrained, &dataset.test);
    let ext = trained.mean_over(&TaskKind::EXTRINSIC);
    let pass = trained.mean >= 0.95 && untrained.mean < 0.60 && t.iterations <= 300 && t.grpo_secs < 120.0;
    outcome(
        pass,
        format!(
            "trained {:.1}% (extrinsic {:.1}%), untrained {:.1}%, {} iterations in {:.1}s",
            100.0 * trained.mean,
            100.0 * ext,
            100.0 * untrained.mean,
            t.iterations,
            t.grpo_secs
        ),
    )
}

fn sft_ablation(dataset: &Dataset, model: &PolicyModel, t: &Trained) -> Outcome {
    let rl = evaluate_intent(model, &t.grpo, &dataset.test).mean_over(&TaskKind::EXTRINSIC);
    let sft = evaluate_intent(model, &t.sft, &dataset.test).mean_over(&TaskKind::EXTRINSIC);
    outcome(sft < rl, format!("extrinsic intent SFT {:.1}% vs GRPO {:.1}%", 100.0 * sft, 100.0 * rl))
}

fn tool_server(dataset: &Dataset, latency_ms: u64) -> ServerHandle {
    let scenes = dataset.test.iter().map(|q| q.scene.clone());
    let server = ToolServer::new(ToolRegistry::default(), scenes).with_uniform_latency(latency_ms);
    serve(Arc::new(server), "127.0.0.1:0").unwrap()
}

fn client(handle: &ServerHandle) -> McpClient {
    let mut c = McpClient::connect(handle.addr()).unwrap();
    c.initialize().unwrap();
    c
}

fn extrinsic(dataset: &Dataset) -> Vec<&QueryInstance> {
    dataset.test.iter().filter(|q| !q.task.is_intrinsic()).collect()
}

fn dense_correctness(dataset: &Dataset, model: &PolicyModel, t: &Trained) -> Outcome {
    let handle = tool_server(dataset, 0);
    let mut c = client(&handle);
    let (mut iou_sum, mut n, mut boxes, mut boxes_exact, mut failed) = (0.0, 0, 0, 0, 0);
    for q in extrinsic(dataset) {
        let Ok(trace) = route(model, &t.grpo, q, Some(&mut c)) else {
            failed += 1;
            n += 1;
            continue;
        };
        let score = score_trace(q, &trace);
        let dense = score.dense.map_or((0.0, false), |d| (d.iou, d.exact));
        iou_sum += dense.0;
        n += 1;
        if q.task == TaskKind::Detection {
            boxes += 1;
            boxes_exact += usize::from(dense.1);
        }
    }
    handle.shutdown();
    let miou = iou_sum / n as f64;
    let exact = boxes_exact as f64 / boxes as f64;
    outcome(
        miou == 1.0 && exact == 1.0,
        format!(
            "mIoU {miou:.4} over {n} instances, box exact {:.1}% of {boxes}, {failed} failed calls",
            100.0 * exact
        ),
    )
}

fn latency(dataset: &Dataset, model: &PolicyModel, t: &Trained) -> Outcome {
    let handle = tool_server(dataset, 100);
    let instances = extrinsic(dataset);
    let workers = 25;
    let pairs: Vec<(RouteTrace, RouteTrace)> = std::thread::scope(|s| {
        let jobs: Vec<_> = instances
            .chunks(instances.len().div_ceil(workers))
            .map(|chunk| {
                let handle = &handle;
                let params = &t.grpo;
                s.spawn(move || {
                    let mut c = client(handle);
                    chunk
                        .iter()
                        .map(|q| {
                            let direct = route(model, params, q, Some(&mut c)).unwrap();
                            let react = react_baseline(model, params, q, &mut c, 3).unwrap();
                            (direct, react)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        jobs.into_iter().flat_map(|j| j.join().unwrap()).collect()
    });
    handle.shutdown();
    let one_trip = pairs.iter().all(|(r, _)| r.round_trips == 1);
    let react_trips = pairs.iter().all(|(_, r)| r.round_trips >= 3);
    let faster = pairs.iter().all(|(r, b)| r.total_ms < b.total_ms);
    let mean = |f: fn(&(RouteTrace, RouteTrace)) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    outcome(
        one_trip && react_trips && faster,
        format!(
            "{} instances, round trips route {} / react >= 3 {}, faster everywhere {faster}, mean total {:.0} vs {:.0} ms",
            pairs.len(),
            if one_trip { "all 1" } else { "not all 1" },
            react_trips,
            mean(|p| p.0.total_ms),
            mean(|p| p.1.total_ms)
        ),
    )
}

fn golden_transcripts() -> Outcome {
    match support::replay() {
        Ok(n) => outcome(n >= 9, format!("{n} transcripts replayed over TCP")),
        Err(e) => outcome(false, e),
    }
}

fn dataset_contract() -> Outcome {
    let start = Instant::now();
    let ds = build_dataset(&DatasetConfig::paper(), 0).unwrap();
    let count = |set: &[QueryInstance], t: TaskKind| set.iter().filter(|q| q.task == t).count();
    let train_ok = TaskKind::INTRINSIC.iter().all(|&t| count(&ds.train, t) == 1000) && ds.train.len() == 5000;
    let test_ok = TaskKind::ALL.iter().all(|&t| count(&ds.test, t) == 100) && ds.test.len() == 1000;
    let leaked = ds.train.iter().filter(|q| !q.task.is_intrinsic()).count();
    outcome(
        train_ok && test_ok && leaked == 0,
        format!(
            "train {} test {} extrinsic-in-train {leaked}, {:.1}s",
            ds.train.len(),
            ds.test.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let total = Instant::now();
    let dataset = build_dataset(&DatasetConfig::desk(), 0).unwrap();
    let model = setup(&dataset);
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "reward assignment matches brute force", hungarian_oracle()),
        (2, "numeric reward properties", num_reward_properties()),
        (3, "label-set reward branches", text_reward_branches()),
        (4, "group advantages standardized", advantage_standardization(&dataset, &model)),
        (5, "objective gradient matches finite differences", gradient_check(&dataset, &model)),
        (6, "KL penalty keeps policy near reference", kl_penalty(&dataset, &model)),
    ];
    let trained = train_both(&dataset, &model);
    results.push((7, "intent recognition after training", intent_recognition(&dataset, &model, &trained)));
    results.push((8, "SFT below GRPO on extrinsic intent", sft_ablation(&dataset, &model, &trained)));
    results.push((9, "end-to-end dense correctness", dense_correctness(&dataset, &model, &trained)));
    results.push((10, "single round trip beats ReAct", latency(&dataset, &model, &trained)));
    results.push((11, "wire transcripts byte-exact", golden_transcripts()));
    results.push((12, "dataset contract", dataset_contract()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {:.1?}", results.len() - failed, results.len(), total.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
