//! Turns policy output into either a direct answer or a single tool call.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcp::{McpClient, McpError};
pub use crate::mcp::DensePrediction;
use crate::policy::{greedy_decode, tool_slots, PolicyModel, PolicyParams, TokenKind, Vocab};
use crate::reward::{extract_answer, render_answer, ANSWER_CLOSE, ANSWER_OPEN};
use crate::scene::Target;
use crate::vagueeo::{QueryInstance, TaskKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentAction {
    DirectAnswer { answer_text: String },
    ToolCall { tool_id: String, params: BTreeMap<String, String> },
}

impl AgentAction {
    pub fn route(&self) -> Route {
        match self {
            AgentAction::DirectAnswer { .. } => Route::Intrinsic,
            AgentAction::ToolCall { .. } => Route::Extrinsic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Intrinsic,
    Extrinsic,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed action: {0}")]
pub struct MalformedAction(pub String);

/// Reads a token sequence as an action.
///
/// A sequence opening with a tool token must fill exactly that tool's slots
/// and then stop; anything else is rendered as a direct answer.
pub fn decode_action(tokens: &[usize], vocab: &Vocab) -> Result<AgentAction, MalformedAction> {
    let Some(&first) = tokens.first() else {
        return Ok(AgentAction::DirectAnswer { answer_text: String::new() });
    };
    let TokenKind::Tool(tool) = vocab.kind(first) else {
        return Ok(AgentAction::DirectAnswer { answer_text: vocab.render(tokens) });
    };
    let mut params = BTreeMap::new();
    let mut rest = tokens[1..].iter();
    for &slot in tool_slots(tool) {
        match rest.next().map(|&t| vocab.kind(t)) {
            Some(TokenKind::Param(s, value)) if *s == slot => {
                params.insert(slot.key().to_string(), value.clone());
            }
            Some(_) => {
                return Err(MalformedAction(format!("{tool}: expected a {} slot", slot.key())));
            }
            None => return Err(MalformedAction(format!("{tool}: missing {} slot", slot.key()))),
        }
    }
    match rest.next() {
        None => {}
        Some(&t) if t == vocab.eos() => {}
        Some(&t) => {
            return Err(MalformedAction(format!(
                "{tool}: unexpected token {:?} after the call",
                vocab.token(t)
            )))
        }
    }
    Ok(AgentAction::ToolCall { tool_id: tool.clone(), params })
}

/// Inverse of [`decode_action`] on canonical actions.
pub fn encode_action(action: &AgentAction, vocab: &Vocab) -> Option<Vec<usize>> {
    match action {
        AgentAction::DirectAnswer { answer_text } => {
            let span = extract_answer(answer_text);
            let canonical = format!("{ANSWER_OPEN}{}{ANSWER_CLOSE}", span.raw);
            if !span.valid || canonical != *answer_text {
                return None;
            }
            vocab.encode_answer(&span.raw)
        }
        AgentAction::ToolCall { tool_id, params } => {
            let mut out = vec![vocab.tool_token(tool_id)?];
            let slots = tool_slots(tool_id);
            if params.len() != slots.len() {
                return None;
            }
            for slot in slots {
                let tok = vocab.param_token(params.get(slot.key())?)?;
                match vocab.kind(tok) {
                    TokenKind::Param(s, _) if s == slot => out.push(tok),
                    _ => return None,
                }
            }
            out.push(vocab.eos());
            Some(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RouteResult {
    Answer { text: String },
    Dense { prediction: DensePrediction },
    Failure { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteTrace {
    pub instance_id: String,
    pub task: TaskKind,
    pub action: Option<AgentAction>,
    pub route: Route,
    pub round_trips: u64,
    pub llm_ms: f64,
    pub tool_ms: f64,
    pub total_ms: f64,
    pub result: RouteResult,
}

impl RouteTrace {
    pub fn intent_correct(&self) -> bool {
        intent_correct(self.task, self.action.as_ref())
    }
}

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("router configuration: {0}")]
    Config(String),
    #[error("tool call failed for {}: {source}", trace.instance_id)]
    Tool { source: McpError, trace: Box<RouteTrace> },
}

/// Whether an action routes its task correctly.
pub fn intent_correct(task: TaskKind, action: Option<&AgentAction>) -> bool {
    match (task.tool(), action) {
        (None, Some(AgentAction::DirectAnswer { .. })) => true,
        (Some(tool), Some(AgentAction::ToolCall { tool_id, .. })) => tool == tool_id,
        _ => false,
    }
}

/// Greedy-decoded action for an instance; `Err` when the call is malformed.
pub fn decide(
    model: &PolicyModel,
    params: &PolicyParams,
    instance: &QueryInstance,
) -> (Vec<usize>, Result<AgentAction, MalformedAction>) {
    let features = model.featurize(instance);
    let tokens = greedy_decode(model, params, &features);
    let action = decode_action(&tokens, &model.vocab);
    (tokens, action)
}

/// The action a perfect router would emit, built from the ground truth.
pub fn oracle_action(instance: &QueryInstance) -> Option<AgentAction> {
    let Some(tool) = instance.task.tool() else {
        let text = render_answer(&instance.ground_truth)?;
        return Some(AgentAction::DirectAnswer {
            answer_text: format!("{ANSWER_OPEN}{}{ANSWER_CLOSE}", text.replace(", ", ",")),
        });
    };
    let scene = &instance.scene;
    let mut params = BTreeMap::new();
    match (instance.task, instance.target()) {
        (TaskKind::ChangeDetection, _) => {
            params.insert("epoch".to_string(), crate::policy::EPOCH_PARAM.to_string());
        }
        (_, Some(Target::Class(c))) => {
            params.insert("target".to_string(), scene.class_name(c)?.to_string());
        }
        (_, Some(Target::Object(i))) => {
            let o = scene.objects_t0.get(i)?;
            params.insert("target".to_string(), scene.class_name(o.class_id)?.to_string());
            params.insert("size".to_string(), o.size_word().to_string());
            params.insert("position".to_string(), o.position_word().to_string());
        }
        (_, None) => return None,
    }
    Some(AgentAction::ToolCall { tool_id: tool.to_string(), params })
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn call_args(instance: &QueryInstance, params: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut args = params.clone();
    args.insert("scene".to_string(), instance.scene.id.clone());
    args
}

/// Executes an already-decoded action with at most one `tools/call`.
pub fn execute_action(
    instance: &QueryInstance,
    action: Result<AgentAction, MalformedAction>,
    first_token_is_tool: bool,
    llm_ms: f64,
    client: Option<&mut McpClient>,
) -> Result<RouteTrace, RouteError> {
    let started = Instant::now();
    let mut trace = RouteTrace {
        instance_id: instance.id.clone(),
        task: instance.task,
        action: None,
        route: if first_token_is_tool { Route::Extrinsic } else { Route::Intrinsic },
        round_trips: 0,
        llm_ms,
        tool_ms: 0.0,
        total_ms: llm_ms,
        result: RouteResult::Failure { message: String::new() },
    };
    let action = match action {
        Ok(a) => a,
        Err(e) => {
            trace.result = RouteResult::Failure { message: e.to_string() };
            return Ok(trace);
        }
    };
    trace.route = action.route();
    trace.action = Some(action.clone());
    match action {
        AgentAction::DirectAnswer { answer_text } => {
            trace.result = RouteResult::Answer { text: answer_text };
        }
        AgentAction::ToolCall { tool_id, params } => {
            let Some(client) = client else {
                let source = McpError::Protocol("no tool client connected".into());
                return Err(RouteError::Tool { source, trace: Box::new(trace) });
            };
            let before = client.round_trips();
            let res = client.call_tool(&tool_id, &call_args(instance, &params));
            trace.round_trips = client.round_trips() - before;
            trace.tool_ms = ms_since(started);
            trace.total_ms = llm_ms + trace.tool_ms;
            match res {
                Ok(r) => trace.result = RouteResult::Dense { prediction: r.prediction },
                Err(source) => {
                    trace.result = RouteResult::Failure { message: source.to_string() };
                    return Err(RouteError::Tool { source, trace: Box::new(trace) });
                }
            }
        }
    }
    Ok(trace)
}

fn first_is_tool(tokens: &[usize], vocab: &Vocab) -> bool {
    tokens.first().is_some_and(|&t| matches!(vocab.kind(t), TokenKind::Tool(_)))
}

/// Greedy decode, then either answer directly or make exactly one tool call.
pub fn route(
    model: &PolicyModel,
    params: &PolicyParams,
    instance: &QueryInstance,
    client: Option<&mut McpClient>,
) -> Result<RouteTrace, RouteError> {
    let start = Instant::now();
    let (tokens, action) = decide(model, params, instance);
    let llm_ms = ms_since(start);
    execute_action(instance, action, first_is_tool(&tokens, &model.vocab), llm_ms, client)
}

/// Scripted observe-think-act loop: list tools, probe, then the final call.
pub fn react_baseline(
    model: &PolicyModel,
    params: &PolicyParams,
    instance: &QueryInstance,
    client: &mut McpClient,
    max_steps: usize,
) -> Result<RouteTrace, RouteError> {
    if max_steps < 3 {
        return Err(RouteError::Config(format!("react loop needs at least 3 steps, got {max_steps}")));
    }
    let mut llm_ms = 0.0;
    let mut tool_ms = 0.0;
    let before = client.round_trips();
    let think = |llm_ms: &mut f64| {
        let start = Instant::now();
        let out = decide(model, params, instance);
        *llm_ms += ms_since(start);
        out
    };

    // Observe.
    let (tokens, action) = think(&mut llm_ms);
    let t = Instant::now();
    let listed = client.list_tools();
    tool_ms += ms_since(t);
    let mut trace = RouteTrace {
        instance_id: instance.id.clone(),
        task: instance.task,
        action: action.as_ref().ok().cloned(),
        route: if first_is_tool(&tokens, &model.vocab) { Route::Extrinsic } else { Route::Intrinsic },
        round_trips: client.round_trips() - before,
        llm_ms,
        tool_ms,
        total_ms: llm_ms + tool_ms,
        result: RouteResult::Failure { message: String::new() },
    };
    if let Err(source) = listed {
        return Err(RouteError::Tool { source, trace: Box::new(trace) });
    }
    let action = match action {
        Ok(a) => a,
        Err(e) => {
            trace.result = RouteResult::Failure { message: e.to_string() };
            return Ok(trace);
        }
    };
    let AgentAction::ToolCall { tool_id, params: call_params } = &action else {
        let AgentAction::DirectAnswer { answer_text } = &action else { unreachable!() };
        trace.result = RouteResult::Answer { text: answer_text.clone() };
        return Ok(trace);
    };
    let args = call_args(instance, call_params);

    // Probe, reflect, then act; the remaining step budget is spent thinking.
    let mut outcome = None;
    for step in 1..max_steps {
        let _ = think(&mut llm_ms);
        if step > 2 {
            continue;
        }
        let t = Instant::now();
        let res = client.call_tool(tool_id, &args);
        tool_ms += ms_since(t);
        trace.round_trips = client.round_trips() - before;
        trace.llm_ms = llm_ms;
        trace.tool_ms = tool_ms;
        trace.total_ms = llm_ms + tool_ms;
        match res {
            Ok(r) => outcome = Some(r.prediction),
            Err(source) => {
                trace.result = RouteResult::Failure { message: source.to_string() };
                return Err(RouteError::Tool { source, trace: Box::new(trace) });
            }
        }
    }
    trace.llm_ms = llm_ms;
    trace.total_ms = llm_ms + tool_ms;
    trace.result = match outcome {
        Some(prediction) => RouteResult::Dense { prediction },
        None => RouteResult::Failure { message: "no tool result".into() },
    };
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentReport {
    pub per_task: BTreeMap<TaskKind, f64>,
    pub counts: BTreeMap<TaskKind, usize>,
    pub mean: f64,
}

impl IntentReport {
    pub fn mean_over(&self, tasks: &[TaskKind]) -> f64 {
        let vals: Vec<f64> = tasks.iter().filter_map(|t| self.per_task.get(t).copied()).collect();
        if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 }
    }
}

/// Per-task and unweighted mean intent accuracy under any decoder.
pub fn evaluate_intent_with<F>(test: &[QueryInstance], mut decoder: F) -> IntentReport
where
    F: FnMut(&QueryInstance) -> Option<AgentAction>,
{
    let mut hits: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    for q in test {
        let action = decoder(q);
        let e = hits.entry(q.task).or_default();
        e.1 += 1;
        if intent_correct(q.task, action.as_ref()) {
            e.0 += 1;
        }
    }
    let per_task: BTreeMap<TaskKind, f64> =
        hits.iter().map(|(&t, &(h, n))| (t, h as f64 / n as f64)).collect();
    let counts = hits.iter().map(|(&t, &(_, n))| (t, n)).collect();
    let mean = if per_task.is_empty() {
        0.0
    } else {
        per_task.values().sum::<f64>() / per_task.len() as f64
    };
    IntentReport { per_task, counts, mean }
}

pub fn evaluate_intent(model: &PolicyModel, params: &PolicyParams, test: &[QueryInstance]) -> IntentReport {
    evaluate_intent_with(test, |q| decide(model, params, q).1.ok())
}
