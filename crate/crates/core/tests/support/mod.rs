//! Golden transcript replay shared by the test targets.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use georouter::mcp::{serve, Session, ToolRegistry, ToolServer};
use georouter::scene::{generate_scene, SceneConfig};

fn server() -> ToolServer {
    let scenes = [(11, false), (12, true)]
        .map(|(seed, bitemporal)| generate_scene(seed, &SceneConfig { bitemporal, ..SceneConfig::default() }).unwrap());
    ToolServer::new(ToolRegistry::default(), scenes)
}

struct Step {
    request: String,
    responses: Vec<String>,
}

fn parse(text: &str) -> Result<Vec<Step>, String> {
    let mut steps: Vec<Step> = Vec::new();
    for line in text.lines() {
        if let Some(req) = line.strip_prefix("> ") {
            steps.push(Step { request: req.to_string(), responses: Vec::new() });
        } else if let Some(resp) = line.strip_prefix("< ") {
            steps.last_mut().ok_or("response before any request")?.responses.push(resp.to_string());
        } else if !line.trim().is_empty() {
            return Err(format!("unexpected transcript line {line:?}"));
        }
    }
    Ok(steps)
}

pub fn transcripts() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    files
}

#[allow(dead_code)]
/// Rewrites the response lines of every transcript from in-process replies.
pub fn bless() {
    let server = server();
    for path in transcripts() {
        let steps = parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let mut session = Session::default();
        let mut out = String::new();
        for step in steps {
            out.push_str(&format!("> {}\n", step.request));
            if let Some(resp) = server.handle_line(&mut session, &step.request) {
                out.push_str(&format!("< {resp}\n"));
            }
        }
        std::fs::write(&path, out).unwrap();
    }
}

/// Replays every transcript over a fresh TCP session; returns the count.
pub fn replay() -> Result<usize, String> {
    let files = transcripts();
    let handle = serve(Arc::new(server()), "127.0.0.1:0").map_err(|e| e.to_string())?;
    for path in &files {
        let name = path.file_name().unwrap().to_string_lossy();
        let steps = parse(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)?;
        if steps.iter().all(|s| s.responses.is_empty()) {
            return Err(format!("{name} has no responses"));
        }
        let stream = TcpStream::connect(handle.addr()).map_err(|e| e.to_string())?;
        let mut reader = BufReader::new(stream.try_clone().map_err(|e| e.to_string())?);
        let mut writer = stream;
        for step in &steps {
            writer.write_all(format!("{}\n", step.request).as_bytes()).map_err(|e| e.to_string())?;
            for expected in &step.responses {
                let mut line = String::new();
                reader.read_line(&mut line).map_err(|e| e.to_string())?;
                if line != format!("{expected}\n") {
                    return Err(format!("{name}: reply to {}\n  expected {expected}\n  got      {line}", step.request));
                }
            }
        }
        writer.shutdown(Shutdown::Write).map_err(|e| e.to_string())?;
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(|e| e.to_string())?;
        if !rest.is_empty() {
            return Err(format!("{name}: unexpected trailing output {:?}", String::from_utf8_lossy(&rest)));
        }
    }
    handle.shutdown();
    Ok(files.len())
}
