use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorError, DetectorState};
use crate::text_space::{CategoryMapping, TextEmbeddingBank};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters, the classification bank, the category mapping (if any)
/// and free-form run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state: DetectorState,
    pub bank: TextEmbeddingBank,
    pub mapping: Option<CategoryMapping>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(state: DetectorState, bank: TextEmbeddingBank, mapping: Option<CategoryMapping>) -> Self {
        Self { version: CHECKPOINT_VERSION, state, bank, mapping, metadata: BTreeMap::new() }
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let text = serde_json::to_string(self).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| DetectorError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(DetectorError::Checkpoint(format!(
                "{}: unsupported version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
