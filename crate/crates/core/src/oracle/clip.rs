//! CLIP backend served by a Python `transformers` child process.
//!
//! The model comes from `model_path` when set, otherwise from `model_id`
//! (a hub name such as `openai/clip-vit-base-patch32`). The interpreter is
//! `python3` unless `CLIPIOD_PYTHON` names another.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use serde::Deserialize;
use serde_json::json;

use super::{EmbeddingOracle, EmbeddingVector, OracleConfig, OracleError};

const BRIDGE: &str = include_str!("clip_bridge.py");
pub const DEFAULT_MODEL: &str = "openai/clip-vit-base-patch32";

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ClipOracle {
    model_id: String,
    dim: usize,
    input_size: u32,
    pipe: Mutex<Pipe>,
}

#[derive(Deserialize)]
struct Reply {
    #[serde(default)]
    vectors: Vec<Vec<f64>>,
    dim: Option<usize>,
    input_size: Option<u32>,
    error: Option<String>,
}

fn unavailable(e: impl std::fmt::Display) -> OracleError {
    OracleError::Unavailable(format!("clip bridge: {e}"))
}

impl ClipOracle {
    pub fn load(config: &OracleConfig) -> Result<Self, OracleError> {
        let model_id = if config.model_id.starts_with("stub") { DEFAULT_MODEL.to_string() } else { config.model_id.clone() };
        let source = match &config.model_path {
            Some(p) => p.display().to_string(),
            None => model_id.clone(),
        };
        let python = std::env::var("CLIPIOD_PYTHON").unwrap_or_else(|_| "python3".into());
        let mut child = Command::new(python)
            .arg("-c")
            .arg(BRIDGE)
            .arg(&source)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(unavailable)?;
        let stdin = child.stdin.take().ok_or_else(|| unavailable("no stdin"))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| unavailable("no stdout"))?);
        let mut pipe = Pipe { child, stdin, stdout };
        let info = request(&mut pipe, &json!({"op": "info"}))?;
        let dim = info.dim.ok_or_else(|| unavailable("info reply without dim"))?;
        let input_size = info.input_size.ok_or_else(|| unavailable("info reply without input_size"))?;
        log::info!("clip backend {model_id} ready (dim {dim}, input {input_size}px)");
        Ok(Self { model_id, dim, input_size, pipe: Mutex::new(pipe) })
    }

    fn ask(&self, req: &serde_json::Value) -> Result<Vec<EmbeddingVector>, OracleError> {
        let mut pipe = self.pipe.lock().map_err(|_| unavailable("poisoned lock"))?;
        let reply = request(&mut pipe, req)?;
        reply.vectors.into_iter().map(EmbeddingVector::normalized).collect()
    }
}

fn request(pipe: &mut Pipe, req: &serde_json::Value) -> Result<Reply, OracleError> {
    writeln!(pipe.stdin, "{req}")?;
    pipe.stdin.flush()?;
    let mut line = String::new();
    if pipe.stdout.read_line(&mut line)? == 0 {
        return Err(unavailable("bridge exited"));
    }
    let reply: Reply = serde_json::from_str(&line).map_err(unavailable)?;
    match reply.error {
        Some(e) => Err(unavailable(e)),
        None => Ok(reply),
    }
}

impl Drop for ClipOracle {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl EmbeddingOracle for ClipOracle {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn embed_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        if prompts.is_empty() {
            return Err(OracleError::EmptyPrompts);
        }
        self.ask(&json!({"op": "text", "prompts": prompts}))
    }

    fn embed_crop(&self, crop: &RgbImage) -> Result<EmbeddingVector, OracleError> {
        let mut png = Vec::new();
        crop.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| OracleError::DegenerateCrop(e.to_string()))?;
        let mut v = self.ask(&json!({"op": "image", "png": STANDARD.encode(&png)}))?;
        v.pop().ok_or_else(|| unavailable("empty image reply"))
    }
}
