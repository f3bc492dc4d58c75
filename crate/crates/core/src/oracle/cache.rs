//! On-disk text-embedding cache keyed by `(model_id, prompt)`.
//!
//! One record per line: `<sha256 hex of model_id NUL prompt>\t<base64 of little-endian f64s>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use sha2::{Digest, Sha256};

use super::{EmbeddingOracle, EmbeddingVector, OracleError};

/// Environment variable naming the directory that holds the cache file.
pub const CACHE_DIR_ENV: &str = "CLIPIOD_CACHE_DIR";
const CACHE_FILE: &str = "text_embeddings.cache";

#[derive(Debug, Default)]
pub struct TextCache {
    entries: BTreeMap<String, Vec<f64>>,
    path: Option<PathBuf>,
}

pub fn cache_key(model_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str) -> Option<Vec<f64>> {
    let bytes = STANDARD.decode(text).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl TextCache {
    /// Opens the cache file in `dir`, creating an empty cache if it is absent.
    pub fn open(dir: &Path) -> Result<Self, OracleError> {
        let path = dir.join(CACHE_FILE);
        let mut cache = TextCache { entries: BTreeMap::new(), path: Some(path.clone()) };
        if !path.exists() {
            return Ok(cache);
        }
        let text = fs::read_to_string(&path)?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || OracleError::Cache { path: path.clone(), reason: format!("malformed record on line {}", i + 1) };
            let (key, val) = line.split_once('\t').ok_or_else(bad)?;
            cache.entries.insert(key.to_string(), decode(val).ok_or_else(bad)?);
        }
        Ok(cache)
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model_id: &str, prompt: &str) -> Option<&Vec<f64>> {
        self.entries.get(&cache_key(model_id, prompt))
    }

    /// Inserts and, for file-backed caches, appends the record.
    pub fn insert(&mut self, model_id: &str, prompt: &str, values: Vec<f64>) -> Result<(), OracleError> {
        let key = cache_key(model_id, prompt);
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{key}\t{}", encode(&values))?;
        }
        self.entries.insert(key, values);
        Ok(())
    }
}

/// Wraps an oracle so text embeddings are served from a [`TextCache`].
pub struct CachedOracle<O> {
    inner: O,
    cache: Mutex<TextCache>,
}

impl<O: EmbeddingOracle> CachedOracle<O> {
    pub fn new(inner: O, cache: TextCache) -> Self {
        Self { inner, cache: Mutex::new(cache) }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl<O: EmbeddingOracle> EmbeddingOracle for CachedOracle<O> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn input_size(&self) -> u32 {
        self.inner.input_size()
    }

    fn embed_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        if prompts.is_empty() {
            return Err(OracleError::EmptyPrompts);
        }
        let model = self.inner.model_id().to_string();
        let mut cache = self.cache.lock().expect("cache lock");
        let missing: Vec<String> = prompts.iter().filter(|p| cache.get(&model, p).is_none()).cloned().collect();
        if !missing.is_empty() {
            let fresh = self.inner.embed_texts(&missing)?;
            for (p, v) in missing.iter().zip(fresh) {
                cache.insert(&model, p, v.values)?;
            }
        }
        prompts
            .iter()
            .map(|p| EmbeddingVector::normalized(cache.get(&model, p).expect("just filled").clone()))
            .collect()
    }

    fn embed_crop(&self, crop: &RgbImage) -> Result<EmbeddingVector, OracleError> {
        self.inner.embed_crop(crop)
    }
}
