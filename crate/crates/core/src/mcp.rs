//! Tool server and client speaking newline-delimited JSON-RPC 2.0.
//!
//! The server exposes five stub experts that compute exact dense outputs
//! from the synthetic scenes it was started with. Scenes are referenced by id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::scene::{cell_runs, trace_loops, CellBox, Scene};

pub const PROTOCOL_VERSION: &str = "desk-1";
pub const SERVER_NAME: &str = "georouter-tools";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const NOT_INITIALIZED: i64 = -32002;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub required: bool,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub input_schema: Vec<ParamSpec>,
}

impl ToolDescriptor {
    pub fn required(&self) -> impl Iterator<Item = &str> {
        self.input_schema.iter().filter(|p| p.required).map(|p| p.name.as_str())
    }
}

fn param(name: &str, description: &str) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        kind: "string".to_string(),
        required: true,
        description: description.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToolRegistry {
    tools: Vec<ToolDescriptor>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid tool registry: {0}")]
pub struct RegistryError(String);

impl ToolRegistry {
    pub fn new(tools: Vec<ToolDescriptor>) -> Result<Self, RegistryError> {
        let mut names = HashSet::new();
        for t in &tools {
            if !names.insert(t.name.as_str()) {
                return Err(RegistryError(format!("duplicate tool {:?}", t.name)));
            }
            let mut params = HashSet::new();
            for p in &t.input_schema {
                if !params.insert(p.name.as_str()) {
                    return Err(RegistryError(format!("{}: duplicate parameter {:?}", t.name, p.name)));
                }
            }
        }
        Ok(ToolRegistry { tools })
    }

    pub fn tools(&self) -> &[ToolDescriptor] {
        &self.tools
    }

    pub fn get(&self, name: &str) -> Option<&ToolDescriptor> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.iter().map(|t| t.name.as_str())
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        let scene = || param("scene", "scene id");
        let target = || param("target", "class name");
        let tools = vec![
            ToolDescriptor {
                name: "det".into(),
                description: "Frames every individual instance of a class, marking each one with \
                              a tight box."
                    .into(),
                input_schema: vec![scene(), target()],
            },
            ToolDescriptor {
                name: "seg".into(),
                description: "Paints the full pixel coverage of a class across the scene, shading \
                              matching pixels."
                    .into(),
                input_schema: vec![scene(), target()],
            },
            ToolDescriptor {
                name: "res".into(),
                description: "Isolates the exact shape of one particular object named by its size \
                              and position."
                    .into(),
                input_schema: vec![
                    scene(),
                    target(),
                    param("size", "small or large"),
                    param("position", "top-left, top-right, bottom-left or bottom-right"),
                ],
            },
            ToolDescriptor {
                name: "cd".into(),
                description: "Compares the earlier and later epochs of a scene and reports what \
                              changed between them."
                    .into(),
                input_schema: vec![scene(), param("epoch", "second epoch, t1")],
            },
            ToolDescriptor {
                name: "ce".into(),
                description: "Traces the outline of a class along its edges and borders.".into(),
                input_schema: vec![scene(), target()],
            },
        ];
        ToolRegistry { tools }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensePrediction {
    Boxes {
        boxes: Vec<CellBox>,
    },
    Mask {
        class_id: u8,
        #[serde(with = "cell_runs")]
        cells: Vec<u32>,
    },
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

impl DensePrediction {
    /// Every cell index and vertex lies inside a `width × height` raster.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        let n = width * height;
        match self {
            DensePrediction::Boxes { boxes } => {
                boxes.iter().all(|b| b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= width && b.y2 <= height)
            }
            DensePrediction::Mask { cells, .. } => cells.iter().all(|&c| c < n),
            DensePrediction::MaskPair { before, after } => {
                before.iter().chain(after).all(|&c| c < n)
            }
            DensePrediction::Contours { loops } => {
                loops.iter().flatten().all(|&[x, y]| x <= width && y <= height)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolResult {
    pub tool: String,
    pub scene: String,
    pub prediction: DensePrediction,
    pub compute_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("{0}")]
    InvalidParams(String),
}

impl ToolError {
    fn code(&self) -> i64 {
        match self {
            ToolError::UnknownTool(_) => METHOD_NOT_FOUND,
            ToolError::InvalidParams(_) => INVALID_PARAMS,
        }
    }
}

/// Runs a stub expert on a scene.
pub fn execute_tool(
    registry: &ToolRegistry,
    name: &str,
    args: &BTreeMap<String, String>,
    scene: &Scene,
) -> Result<DensePrediction, ToolError> {
    let tool = registry.get(name).ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
    for key in args.keys() {
        if !tool.input_schema.iter().any(|p| &p.name == key) {
            return Err(ToolError::InvalidParams(format!("{name}: unexpected parameter {key:?}")));
        }
    }
    for key in tool.required() {
        if !args.contains_key(key) {
            return Err(ToolError::InvalidParams(format!("{name}: missing parameter {key:?}")));
        }
    }
    let class = || {
        let target = &args["target"];
        scene
            .class_id(target)
            .ok_or_else(|| ToolError::InvalidParams(format!("unknown class {target:?}")))
    };
    match name {
        "det" => {
            let c = class()?;
            let mut boxes: Vec<CellBox> = scene.objects_of(c).map(|o| o.bbox).collect();
            boxes.sort();
            Ok(DensePrediction::Boxes { boxes })
        }
        "seg" => {
            let c = class()?;
            Ok(DensePrediction::Mask { class_id: c, cells: scene.raster_t0.class_cells(c) })
        }
        "res" => {
            let c = class()?;
            let attrs = [args["size"].clone(), args["position"].clone()];
            match scene.matching_objects(c, &attrs).as_slice() {
                [i] => {
                    let o = &scene.objects_t0[*i];
                    Ok(DensePrediction::Mask { class_id: c, cells: o.mask.clone() })
                }
                [] => Err(ToolError::InvalidParams("no object matches the description".into())),
                _ => Err(ToolError::InvalidParams("the description is ambiguous".into())),
            }
        }
        "cd" => {
            if args["epoch"] != "t1" {
                return Err(ToolError::InvalidParams(format!("unknown epoch {:?}", args["epoch"])));
            }
            let (before, after) = scene
                .change_cells()
                .ok_or_else(|| ToolError::InvalidParams("scene has no second epoch".into()))?;
            Ok(DensePrediction::MaskPair { before, after })
        }
        "ce" => {
            let c = class()?;
            let cells = scene.raster_t0.class_cells(c);
            Ok(DensePrediction::Contours { loops: trace_loops(&cells, scene.width()) })
        }
        other => Err(ToolError::UnknownTool(other.to_string())),
    }
}

/// Shared state of a tool server.
pub struct ToolServer {
    registry: ToolRegistry,
    scenes: HashMap<String, Scene>,
    latency_ms: BTreeMap<String, u64>,
}

#[derive(Default)]
pub struct Session {
    initialized: bool,
}

fn rpc_error(id: Value, code: i64, message: impl Into<String>) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message.into()}})
}

fn rpc_result(id: Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CallParams {
    name: String,
    #[serde(default)]
    arguments: BTreeMap<String, String>,
}

impl ToolServer {
    pub fn new(registry: ToolRegistry, scenes: impl IntoIterator<Item = Scene>) -> Self {
        let scenes = scenes.into_iter().map(|s| (s.id.clone(), s)).collect();
        ToolServer { registry, scenes, latency_ms: BTreeMap::new() }
    }

    /// Sleeps this long inside every call of `tool`.
    pub fn with_latency(mut self, tool: &str, ms: u64) -> Self {
        self.latency_ms.insert(tool.to_string(), ms);
        self
    }

    pub fn with_uniform_latency(mut self, ms: u64) -> Self {
        let names: Vec<String> = self.registry.names().map(String::from).collect();
        for name in names {
            self.latency_ms.insert(name, ms);
        }
        self
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    /// Handles one request line; returns the response line, if any.
    pub fn handle_line(&self, session: &mut Session, line: &str) -> Option<String> {
        let response = self.handle_value(session, line)?;
        Some(serde_json::to_string(&response).expect("json values always serialize"))
    }

    fn handle_value(&self, session: &mut Session, line: &str) -> Option<Value> {
        let Ok(msg) = serde_json::from_str::<Value>(line) else {
            return Some(rpc_error(Value::Null, PARSE_ERROR, "parse error"));
        };
        let Some(obj) = msg.as_object() else {
            return Some(rpc_error(Value::Null, INVALID_REQUEST, "request must be an object"));
        };
        let id = obj.get("id").cloned();
        let valid_id = matches!(id, None | Some(Value::Number(_)) | Some(Value::Null));
        let method = obj.get("method").and_then(Value::as_str);
        if obj.get("jsonrpc") != Some(&json!("2.0")) || method.is_none() || !valid_id {
            let id = if valid_id { id.unwrap_or(Value::Null) } else { Value::Null };
            return Some(rpc_error(id, INVALID_REQUEST, "invalid request"));
        }
        let method = method.unwrap_or_default();
        // Requests without an id are notifications and get no reply.
        let id = id?;
        let params = obj.get("params").cloned().unwrap_or(Value::Null);
        Some(self.dispatch(session, id, method, params))
    }

    fn dispatch(&self, session: &mut Session, id: Value, method: &str, params: Value) -> Value {
        match method {
            "initialize" => {
                session.initialized = true;
                rpc_result(
                    id,
                    json!({
                        "protocol_version": PROTOCOL_VERSION,
                        "server": {"name": SERVER_NAME, "version": env!("CARGO_PKG_VERSION")},
                    }),
                )
            }
            "tools/list" | "tools/call" if !session.initialized => {
                rpc_error(id, NOT_INITIALIZED, "session not initialized")
            }
            "tools/list" => rpc_result(id, json!({"tools": self.registry.tools()})),
            "tools/call" => match self.call(params) {
                Ok(result) => rpc_result(id, serde_json::to_value(result).unwrap_or_default()),
                Err(e) => rpc_error(id, e.code(), e.to_string()),
            },
            other => rpc_error(id, METHOD_NOT_FOUND, format!("method not found: {other}")),
        }
    }

    fn call(&self, params: Value) -> Result<ToolResult, ToolError> {
        let params: CallParams = serde_json::from_value(params)
            .map_err(|e| ToolError::InvalidParams(format!("bad call parameters: {e}")))?;
        if self.registry.get(&params.name).is_none() {
            return Err(ToolError::UnknownTool(params.name));
        }
        let scene_id = params
            .arguments
            .get("scene")
            .ok_or_else(|| ToolError::InvalidParams(format!("{}: missing parameter \"scene\"", params.name)))?;
        let scene = self
            .scenes
            .get(scene_id)
            .ok_or_else(|| ToolError::InvalidParams(format!("unknown scene {scene_id:?}")))?;
        let prediction = execute_tool(&self.registry, &params.name, &params.arguments, scene)?;
        let compute_ms = self.latency_ms.get(&params.name).copied().unwrap_or(0);
        if compute_ms > 0 {
            thread::sleep(Duration::from_millis(compute_ms));
        }
        Ok(ToolResult { tool: params.name, scene: scene.id.clone(), prediction, compute_ms })
    }

    /// Serves one session over a line-oriented stream until EOF.
    pub fn serve_stream<R: BufRead, W: Write>(&self, reader: R, mut writer: W) -> io::Result<()> {
        let mut session = Session::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(resp) = self.handle_line(&mut session, &line) {
                writer.write_all(resp.as_bytes())?;
                writer.write_all(b"\n")?;
                writer.flush()?;
            }
        }
        Ok(())
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds `endpoint` and serves each connection on its own thread.
pub fn serve(server: Arc<ToolServer>, endpoint: impl ToSocketAddrs) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let server = Arc::clone(&server);
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let Ok(read_half) = stream.try_clone() else { return };
                let _ = server.serve_stream(BufReader::new(read_half), stream);
            });
        }
    });
    Ok(ServerHandle { addr, stop, accept: Some(accept) })
}

#[derive(Debug, Error)]
pub enum McpError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("rpc error {code}: {message}")]
    Rpc { code: i64, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
}

impl McpError {
    pub fn code(&self) -> Option<i64> {
        match self {
            McpError::Rpc { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// One client session. Not shareable between concurrent routing instances.
pub struct McpClient {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    round_trips: u64,
}

impl McpClient {
    pub fn new(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        McpClient { reader: Box::new(reader), writer: Box::new(writer), next_id: 1, round_trips: 0 }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, McpError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::new(reader, stream))
    }

    /// Total request/response pairs completed on this session.
    pub fn round_trips(&self) -> u64 {
        self.round_trips
    }

    pub fn request(&mut self, method: &str, params: Value) -> Result<Value, McpError> {
        let id = self.next_id;
        self.next_id += 1;
        let msg = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params});
        let mut line = serde_json::to_string(&msg).expect("json values always serialize");
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let mut resp = String::new();
        if self.reader.read_line(&mut resp)? == 0 {
            return Err(McpError::Transport(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            )));
        }
        self.round_trips += 1;
        let resp: Value =
            serde_json::from_str(&resp).map_err(|e| McpError::Protocol(e.to_string()))?;
        if resp.get("id") != Some(&json!(id)) {
            return Err(McpError::Protocol(format!("response id does not match request {id}")));
        }
        if let Some(err) = resp.get("error") {
            return Err(McpError::Rpc {
                code: err.get("code").and_then(Value::as_i64).unwrap_or(0),
                message: err.get("message").and_then(Value::as_str).unwrap_or("").to_string(),
            });
        }
        resp.get("result").cloned().ok_or_else(|| McpError::Protocol("response has no result".into()))
    }

    pub fn initialize(&mut self) -> Result<Value, McpError> {
        let result = self.request("initialize", json!({"client": "georouter"}))?;
        if result.get("protocol_version") != Some(&json!(PROTOCOL_VERSION)) {
            return Err(McpError::Protocol("unsupported protocol version".into()));
        }
        Ok(result)
    }

    pub fn list_tools(&mut self) -> Result<Vec<ToolDescriptor>, McpError> {
        let result = self.request("tools/list", json!({}))?;
        serde_json::from_value(result.get("tools").cloned().unwrap_or_default())
            .map_err(|e| McpError::Protocol(e.to_string()))
    }

    pub fn call_tool(
        &mut self,
        name: &str,
        arguments: &BTreeMap<String, String>,
    ) -> Result<ToolResult, McpError> {
        let result = self.request("tools/call", json!({"name": name, "arguments": arguments}))?;
        serde_json::from_value(result).map_err(|e| McpError::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{derive_annotation, generate_scene, Annotation, SceneConfig, Target};
    use crate::vagueeo::TaskKind;

    fn scene_with(bitemporal: bool) -> Scene {
        let cfg = SceneConfig { bitemporal, ..SceneConfig::default() };
        generate_scene(11, &cfg).unwrap()
    }

    fn args(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn default_registry_has_five_tools() {
        let reg = ToolRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["det", "seg", "res", "cd", "ce"]);
        assert!(ToolRegistry::new(reg.tools().to_vec()).is_ok());
        let mut dup = reg.tools().to_vec();
        dup.push(dup[0].clone());
        assert!(ToolRegistry::new(dup).is_err());
        let json = serde_json::to_string(reg.tools()).unwrap();
        let back: Vec<ToolDescriptor> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reg.tools());
    }

    #[test]
    fn stubs_match_annotations() {
        let reg = ToolRegistry::default();
        let scene = scene_with(true);
        for (&c, name) in &scene.class_table {
            if scene.count_of(c) == 0 {
                continue;
            }
            let a = args(&[("scene", &scene.id), ("target", name)]);
            let det = execute_tool(&reg, "det", &a, &scene).unwrap();
            let Annotation::BoxSet { boxes } =
                derive_annotation(&scene, TaskKind::Detection, Some(Target::Class(c))).unwrap()
            else {
                unreachable!()
            };
            assert_eq!(det, DensePrediction::Boxes { boxes });
            let seg = execute_tool(&reg, "seg", &a, &scene).unwrap();
            let gt = derive_annotation(&scene, TaskKind::SemanticSeg, Some(Target::Class(c))).unwrap();
            let Annotation::Mask { cells, .. } = gt else { unreachable!() };
            assert_eq!(seg, DensePrediction::Mask { class_id: c, cells });
            let ce = execute_tool(&reg, "ce", &a, &scene).unwrap();
            let gt = derive_annotation(&scene, TaskKind::ContourExtraction, Some(Target::Class(c)));
            let Annotation::Contours { loops } = gt.unwrap() else { unreachable!() };
            assert_eq!(ce, DensePrediction::Contours { loops });
        }
        let cd = execute_tool(&reg, "cd", &args(&[("scene", &scene.id), ("epoch", "t1")]), &scene);
        let Annotation::MaskPair { before, after } =
            derive_annotation(&scene, TaskKind::ChangeDetection, None).unwrap()
        else {
            unreachable!()
        };
        assert_eq!(cd.unwrap(), DensePrediction::MaskPair { before, after });
    }

    #[test]
    fn referring_stub_needs_a_unique_match() {
        let reg = ToolRegistry::default();
        let scene = scene_with(false);
        for (i, o) in scene.objects_t0.iter().enumerate() {
            let name = scene.class_name(o.class_id).unwrap();
            let a = args(&[
                ("scene", &scene.id),
                ("target", name),
                ("size", o.size_word()),
                ("position", o.position_word()),
            ]);
            let result = execute_tool(&reg, "res", &a, &scene);
            if scene.matching_objects(o.class_id, &o.attributes).len() == 1 {
                let gt = derive_annotation(&scene, TaskKind::ReferringSeg, Some(Target::Object(i)));
                let Annotation::Mask { class_id, cells } = gt.unwrap() else { unreachable!() };
                assert_eq!(result.unwrap(), DensePrediction::Mask { class_id, cells });
            } else {
                assert!(matches!(result, Err(ToolError::InvalidParams(_))));
            }
        }
    }

    #[test]
    fn schema_violations_are_rejected() {
        let reg = ToolRegistry::default();
        let scene = scene_with(false);
        let e = execute_tool(&reg, "det", &args(&[("scene", &scene.id)]), &scene);
        assert!(matches!(e, Err(ToolError::InvalidParams(_))));
        let e = execute_tool(&reg, "det", &args(&[("scene", &scene.id), ("target", "dragon")]), &scene);
        assert!(matches!(e, Err(ToolError::InvalidParams(_))));
        let e = execute_tool(
            &reg,
            "det",
            &args(&[("scene", &scene.id), ("target", "plane"), ("color", "red")]),
            &scene,
        );
        assert!(matches!(e, Err(ToolError::InvalidParams(_))));
        let e = execute_tool(&reg, "cd", &args(&[("scene", &scene.id), ("epoch", "t1")]), &scene);
        assert!(matches!(e, Err(ToolError::InvalidParams(_))));
        let e = execute_tool(&reg, "sam", &args(&[]), &scene);
        assert!(matches!(e, Err(ToolError::UnknownTool(_))));
    }

    #[test]
    fn stubs_are_deterministic_and_in_bounds() {
        let reg = ToolRegistry::default();
        let scene = scene_with(true);
        for name in ["det", "seg", "ce"] {
            for class in scene.class_table.values() {
                let a = args(&[("scene", &scene.id), ("target", class)]);
                let p = execute_tool(&reg, name, &a, &scene).unwrap();
                assert_eq!(p, execute_tool(&reg, name, &a, &scene).unwrap());
                assert!(p.fits(scene.width(), scene.height()));
            }
        }
    }

    #[test]
    fn handshake_gates_tool_methods() {
        let server = ToolServer::new(ToolRegistry::default(), [scene_with(false)]);
        let mut s = Session::default();
        let r = server.handle_line(&mut s, r#"{"jsonrpc":"2.0","id":1,"method":"tools/list"}"#);
        assert!(r.unwrap().contains("-32002"));
        let r = server.handle_line(&mut s, r#"{"jsonrpc":"2.0","id":2,"method":"initialize"}"#);
        assert!(r.unwrap().contains(PROTOCOL_VERSION));
        let r = server.handle_line(&mut s, r#"{"jsonrpc":"2.0","id":3,"method":"tools/list"}"#);
        assert!(r.unwrap().contains("\"det\""));
        let r = server.handle_line(&mut s, r#"{"jsonrpc":"2.0","method":"note"}"#);
        assert!(r.is_none());
        let r = server.handle_line(&mut s, "{oops").unwrap();
        assert_eq!(r, r#"{"error":{"code":-32700,"message":"parse error"},"id":null,"jsonrpc":"2.0"}"#);
    }

    #[test]
    fn tcp_sessions_are_isolated() {
        let scene = scene_with(false);
        let id = scene.id.clone();
        let server = Arc::new(ToolServer::new(ToolRegistry::default(), [scene.clone()]));
        let handle = serve(server, "127.0.0.1:0").unwrap();
        let mut a = McpClient::connect(handle.addr()).unwrap();
        let mut b = McpClient::connect(handle.addr()).unwrap();
        a.initialize().unwrap();
        let err = b.list_tools().unwrap_err();
        assert_eq!(err.code(), Some(NOT_INITIALIZED));
        b.initialize().unwrap();
        let class = scene.class_name(scene.objects_t0[0].class_id).unwrap().to_string();
        let ra = a.call_tool("det", &args(&[("scene", &id), ("target", &class)])).unwrap();
        let rb = b.call_tool("seg", &args(&[("scene", &id), ("target", &class)])).unwrap();
        assert_eq!(ra.tool, "det");
        assert_eq!(rb.tool, "seg");
        assert_eq!(a.list_tools().unwrap().len(), 5);
        assert_eq!(a.round_trips(), 3);
        assert_eq!(b.round_trips(), 3);
        handle.shutdown();
    }
}
