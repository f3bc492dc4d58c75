use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticConfig;
use crate::detector::DetectorConfig;
use crate::evaluation::ApMode;
use crate::miner::MinerConfig;
use crate::oracle::{OracleBackend, OracleConfig};
use crate::registry::Setting;
use crate::text_space::PromptTemplate;
use crate::trainer::{Toggles, TrainConfig};

use super::RunError;

/// One experiment: data, method switches and every module's knobs.
///
/// Values come from a TOML file; command-line flags override them afterwards.
/// `seed` is authoritative for training and replaces `train.seed` on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_ap_mode", with = "ap_mode_str")]
    pub ap_mode: ApMode,
    #[serde(default)]
    pub broad_names: Vec<String>,
    #[serde(default)]
    pub extra_names: Vec<String>,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_eval_nms")]
    pub eval_nms_iou: f64,
    /// Reuse a pseudo-annotation store instead of starting empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_store: Option<PathBuf>,
    pub setting: Setting,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub miner: MinerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Generator settings for `prepare-data` on the synthetic setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

fn default_ap_mode() -> ApMode {
    ApMode::Voc11Point
}

fn default_score_threshold() -> f64 {
    0.05
}

fn default_eval_nms() -> f64 {
    0.5
}

mod ap_mode_str {
    use super::ApMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &ApMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match m {
            ApMode::Voc11Point => "voc11",
            ApMode::Area => "area",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ApMode, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl RunConfig {
    /// The desk-scale synthetic experiment with every default.
    pub fn synthetic(data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let syn = SyntheticConfig::default();
        let classes = syn.class_names();
        let n_novel = 2;
        let (base, novel) = classes.split_at(classes.len() - n_novel);
        let mut broad: Vec<String> = Vec::new();
        for p in syn.classes.iter().filter_map(|c| c.parent.as_ref()) {
            if !broad.contains(p) {
                broad.push(p.clone());
            }
        }
        let oracle = OracleConfig {
            stub_similarity_plan: syn.similarity_plan(),
            stub_palette: syn.palette(),
            ..OracleConfig::default()
        };
        Self {
            seed: 7,
            data_root: data_root.into(),
            out_dir: out_dir.into(),
            ap_mode: ApMode::Voc11Point,
            broad_names: broad,
            extra_names: Vec::new(),
            template: PromptTemplate::default(),
            score_threshold: default_score_threshold(),
            eval_nms_iou: default_eval_nms(),
            pseudo_store: None,
            setting: Setting::Synthetic { base: base.to_vec(), novel: novel.to_vec() },
            toggles: Toggles::FULL,
            oracle,
            miner: MinerConfig::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            synthetic: Some(syn),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, RunError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.normalize();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, RunError> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Propagates the run seed and fills stub oracle tables from the synthetic
    /// generator settings when they are left empty.
    pub fn normalize(&mut self) {
        self.train.seed = self.seed;
        if let Some(syn) = &self.synthetic {
            if self.oracle.stub_similarity_plan.is_empty() {
                self.oracle.stub_similarity_plan = syn.similarity_plan();
            }
            if self.oracle.stub_palette.is_empty() {
                self.oracle.stub_palette = syn.palette();
            }
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.train.validate()?;
        self.miner.validate()?;
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(RunError::Config(format!("score_threshold {} outside [0,1]", self.score_threshold)));
        }
        if self.oracle.backend == OracleBackend::Stub && self.oracle.stub_similarity_plan.is_empty() {
            log::warn!("stub oracle without a similarity plan: every text embedding is a hashed random vector");
        }
        Ok(())
    }
}
