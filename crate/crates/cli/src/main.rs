mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use georouter::grpo::{train, TrainingSet};
use georouter::mcp::{serve, McpClient, McpError, ServerHandle, ToolRegistry, ToolServer};
use georouter::metrics::{
    build_report, train_sft_baseline, EvalReport, LatencyRow, LatencyTable, ScoreLog, TraceLog,
};
use georouter::policy::{
    base_policy, load_checkpoint, save_checkpoint, Checkpoint, PolicyModel, PolicySnapshots, PriorConfig,
};
use georouter::reward::{dispatch_reward, render_answer};
use georouter::router::{decide, evaluate_intent, react_baseline, route, IntentReport, RouteError, RouteTrace};
use georouter::vagueeo::{build_dataset, load_jsonl, save_jsonl, Dataset, QueryInstance};
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, Profile, RunConfig, Trainer, SEED_ENV};

const RESOLVED_CONFIG: &str = "resolved_config.toml";
const DATASET_FILE: &str = "dataset.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const TRACES_FILE: &str = "traces.jsonl";
const LATENCY_FILE: &str = "latency.json";

#[derive(Parser)]
#[command(name = "georouter", version, about = "Route vague Earth-observation queries between direct answers and expert tools")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat TOML file of configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Tool server address (host:port).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Run directory for every output of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Milliseconds slept inside every tool call of a served or embedded server.
    #[arg(long, global = true)]
    latency_ms: Option<u64>,
    /// Start a tool server inside this process instead of connecting to --endpoint.
    #[arg(long, global = true)]
    embedded_server: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic dataset.
    GenData,
    /// Train the routing policy.
    Train {
        #[arg(long, value_enum)]
        trainer: Option<Trainer>,
    },
    /// Score one answer, or the direct answers of a checkpoint on the test split.
    EvalReward {
        #[arg(long, requires = "gt")]
        pred: Option<String>,
        #[arg(long, requires = "pred")]
        gt: Option<String>,
    },
    /// Route every test instance and write traces and a report.
    Route,
    /// Serve the stub expert tools until interrupted.
    ServeTools,
    /// Compare single-dispatch routing with the multi-step baseline loop.
    BenchLatency {
        #[arg(long)]
        react_steps: Option<usize>,
    },
    /// Rebuild the report of a run directory.
    Report,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            profile: self.profile,
            seed: self.seed,
            run_id: self.run_id.clone(),
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            checkpoint: self.checkpoint.clone(),
            endpoint: self.endpoint.clone(),
            embedded_server: self.embedded_server.then_some(true),
            latency_ms: self.latency_ms,
            ..Overrides::default()
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut flags = cli.common.overrides();
    match &cli.command {
        Command::Train { trainer } => flags.trainer = *trainer,
        Command::BenchLatency { react_steps } => flags.react_steps = *react_steps,
        _ => {}
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &flags, env_seed.as_deref())?;
    if let Command::EvalReward { pred: Some(pred), gt: Some(gt) } = &cli.command {
        let r = dispatch_reward(pred, gt)?;
        println!("{}", serde_json::json!({"branch": format!("{:?}", r.branch).to_lowercase(), "reward": r.value}));
        return Ok(());
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { .. } => train_cmd(&cfg),
        Command::EvalReward { .. } => eval_reward(&cfg),
        Command::Route => route_cmd(&cfg),
        Command::ServeTools => serve_tools(&cfg),
        Command::BenchLatency { .. } => bench_latency(&cfg),
        Command::Report => report_cmd(&cfg),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => load_jsonl(path).with_context(|| format!("loading dataset {}", path.display())),
        None => Ok(build_dataset(&cfg.dataset_config(), cfg.seed)?),
    }
}

fn model_for(ds: &Dataset) -> Result<PolicyModel> {
    let first = ds.all().next().context("dataset is empty")?;
    Ok(PolicyModel::new(&first.scene.class_table, &ToolRegistry::default())?)
}

fn load_policy(cfg: &RunConfig, model: &PolicyModel) -> Result<Checkpoint> {
    let path = cfg.checkpoint.as_ref().context("this command needs --checkpoint")?;
    load_checkpoint(model, path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let ds = build_dataset(&cfg.dataset_config(), cfg.seed)?;
    let path = cfg.out.join(DATASET_FILE);
    save_jsonl(&ds, &path)?;
    println!("wrote {} train and {} test instances to {}", ds.train.len(), ds.test.len(), path.display());
    Ok(())
}

fn intent_csv(report: &IntentReport) -> String {
    let mut out = String::from("task,instances,intent_accuracy\n");
    for (task, acc) in &report.per_task {
        out.push_str(&format!("{task},{},{acc:.4}\n", report.counts[task]));
    }
    out.push_str(&format!("mean,,{:.4}\n", report.mean));
    out
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = model_for(&ds)?;
    let data = TrainingSet::new(&model, &ds.train)?;
    let init = PolicySnapshots::new(base_policy(&model, &PriorConfig::default(), cfg.seed));
    let grpo = cfg.grpo();
    let started = std::time::Instant::now();
    let (snapshots, rng) = match cfg.trainer {
        Trainer::Grpo => {
            let out = train(&model, &data, init, &grpo, &ds.test)?;
            fs::write(cfg.out.join("training_log.csv"), out.log.to_csv())?;
            (out.snapshots, out.rng)
        }
        Trainer::Sft => {
            let out = train_sft_baseline(&model, &data, init, &grpo)?;
            fs::write(cfg.out.join("training_log.csv"), out.log.to_csv())?;
            (out.snapshots, out.rng)
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    let path = cfg.out.join(CHECKPOINT_FILE);
    let intent = evaluate_intent(&model, &snapshots.active, &ds.test);
    save_checkpoint(&model, &Checkpoint { snapshots, rng }, &path)?;
    fs::write(cfg.out.join("intent.csv"), intent_csv(&intent))?;
    println!(
        "trained {} iterations in {elapsed:.1}s; test intent accuracy {:.4}; checkpoint {}",
        grpo.iterations(data.len()),
        intent.mean,
        path.display()
    );
    Ok(())
}

fn eval_reward(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = model_for(&ds)?;
    let ckpt = load_policy(cfg, &model)?;
    let mut out = String::from("instance_id,task,branch,reward\n");
    let mut total = 0.0;
    let mut n = 0usize;
    for q in ds.test.iter().filter(|q| q.task.is_intrinsic()) {
        let (tokens, _) = decide(&model, &ckpt.snapshots.active, q);
        let gt = render_answer(&q.ground_truth).context("intrinsic instance without a textual answer")?;
        let (value, branch) = match dispatch_reward(&model.vocab.render(&tokens), &gt) {
            Ok(r) => (r.value, format!("{:?}", r.branch).to_lowercase()),
            Err(_) => (0.0, "invalid".to_string()),
        };
        out.push_str(&format!("{},{},{branch},{value:.6}\n", q.id, q.task));
        total += value;
        n += 1;
    }
    fs::write(cfg.out.join("rewards.csv"), out)?;
    println!("mean reward over {n} intrinsic test instances: {:.4}", total / n.max(1) as f64);
    Ok(())
}

fn tool_server(cfg: &RunConfig, ds: &Dataset) -> ToolServer {
    ToolServer::new(ToolRegistry::default(), ds.all().map(|q| q.scene.clone()))
        .with_uniform_latency(cfg.latency_ms)
}

/// Connects to the configured endpoint, or to a fresh in-process server.
fn connect(cfg: &RunConfig, ds: &Dataset) -> Result<(McpClient, Option<ServerHandle>)> {
    let (addr, handle) = if cfg.embedded_server {
        let handle = serve(Arc::new(tool_server(cfg, ds)), "127.0.0.1:0")?;
        (handle.addr().to_string(), Some(handle))
    } else {
        (cfg.endpoint.clone(), None)
    };
    let mut client = McpClient::connect(addr.as_str()).with_context(|| format!("connecting to tool server at {addr}"))?;
    client.initialize()?;
    Ok((client, handle))
}

/// Keeps the trace of a tool failure reported by the server; transport
/// failures end the run.
fn keep_trace(result: Result<RouteTrace, RouteError>) -> Result<RouteTrace> {
    match result {
        Ok(t) => Ok(t),
        Err(RouteError::Tool { source: McpError::Rpc { .. }, trace }) => Ok(*trace),
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    run_id: String,
    #[serde(flatten)]
    trace: RouteTrace,
}

fn write_traces(path: &Path, log: &TraceLog) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in &log.traces {
        serde_json::to_writer(&mut f, &TraceRecord { run_id: log.run_id.clone(), trace: t.clone() })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_traces(path: &Path) -> Result<TraceLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut run_id = None;
    let mut traces = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: TraceRecord = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        match &run_id {
            None => run_id = Some(rec.run_id),
            Some(id) if *id != rec.run_id => bail!("{} mixes run ids {id:?} and {:?}", path.display(), rec.run_id),
            _ => {}
        }
        traces.push(rec.trace);
    }
    Ok(TraceLog { run_id: run_id.unwrap_or_default(), traces })
}

fn write_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    fs::write(cfg.out.join("report.csv"), report.to_csv())?;
    fs::write(cfg.out.join("report.txt"), report.to_text())?;
    fs::write(cfg.out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn route_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = model_for(&ds)?;
    let ckpt = load_policy(cfg, &model)?;
    let (mut client, _server) = connect(cfg, &ds)?;
    let traces = ds
        .test
        .iter()
        .map(|q| keep_trace(route(&model, &ckpt.snapshots.active, q, Some(&mut client))))
        .collect::<Result<Vec<_>>>()?;
    let log = TraceLog { run_id: cfg.run_id.clone(), traces };
    write_traces(&cfg.out.join(TRACES_FILE), &log)?;
    let scores = ScoreLog::from_traces(&log, &ds.test)?;
    let report = build_report(&log, &scores, None)?;
    write_report(cfg, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn serve_tools(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let handle = serve(Arc::new(tool_server(cfg, &ds)), cfg.endpoint.as_str())
        .with_context(|| format!("binding {}", cfg.endpoint))?;
    println!("serving {} scenes on {}", ds.all().count(), handle.addr());
    handle.join();
    Ok(())
}

fn bench_latency(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = model_for(&ds)?;
    let ckpt = load_policy(cfg, &model)?;
    let (mut client, _server) = connect(cfg, &ds)?;
    let params = &ckpt.snapshots.active;
    let extrinsic: Vec<&QueryInstance> = ds.test.iter().filter(|q| !q.task.is_intrinsic()).collect();
    let mut rows = Vec::new();
    let mut same_result = 0usize;
    for q in &extrinsic {
        let fast = keep_trace(route(&model, params, q, Some(&mut client)))?;
        let slow = keep_trace(react_baseline(&model, params, q, &mut client, cfg.react_steps))?;
        same_result += (fast.result == slow.result) as usize;
        rows.push(LatencyRow::from_traces(&fast, &slow));
    }
    let table = LatencyTable { run_id: cfg.run_id.clone(), rows };
    fs::write(cfg.out.join("latency.csv"), table.to_csv())?;
    fs::write(cfg.out.join(LATENCY_FILE), serde_json::to_string_pretty(&table)?)?;
    let summary = georouter::metrics::LatencySummary::from_rows(&table.rows);
    let text = format!(
        "{:<16} {:>11} {:>10} {:>11} {:>11}\n{:<16} {:>11.2} {:>10.2} {:>11.2} {:>11.2}\n{:<16} {:>11.2} {:>10.2} {:>11.2} {:>11.2}\n\n{same_result}/{} instances returned identical predictions\n",
        "method", "round trips", "LLM (ms)", "Tool (ms)", "Total (ms)",
        "route", summary.route_round_trips, summary.route_llm_ms, summary.route_tool_ms, summary.route_total_ms,
        "react", summary.react_round_trips, summary.react_llm_ms, summary.react_tool_ms, summary.react_total_ms,
        extrinsic.len(),
    );
    fs::write(cfg.out.join("latency.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn report_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let log = read_traces(&cfg.out.join(TRACES_FILE))?;
    let latency_path = cfg.out.join(LATENCY_FILE);
    let latency: Option<LatencyTable> = if latency_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&latency_path)?)?)
    } else {
        None
    };
    let scores = ScoreLog::from_traces(&log, &ds.test)?;
    let report = build_report(&log, &scores, latency.as_ref())?;
    write_report(cfg, &report)?;
    print!("{}", report.to_text());
    Ok(())
}
