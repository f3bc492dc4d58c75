//! Mining of unlabeled objects among background-predicted proposals.
//!
//! Proposals the detector calls background are re-scored by the oracle over
//! the stage label space plus the broad names. Confident broad-name hits become
//! pseudo boxes, kept per image under a same-label NMS invariant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{nms, BBox};
use crate::oracle::{embed_image_region, score_against, EmbeddingOracle, OracleConfig, OracleError};
use crate::text_space::PromptTemplate;

#[derive(Debug, thiserror::Error)]
pub enum MinerError {
    #[error("invalid miner config: {0}")]
    Config(String),
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("cannot store field {0:?}: tabs and newlines are not allowed")]
    Unstorable(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub enabled: bool,
    /// Oracle probability a broad name must exceed.
    pub tr: f64,
    /// Both proposal sides must exceed this, in original image pixels.
    pub min_side: f64,
    pub top_k_background: usize,
    pub nms_iou: f64,
    /// Training iterations before the first mining attempt.
    pub start_iter: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self { enabled: true, tr: 0.7, min_side: 100.0, top_k_background: 10, nms_iou: 0.5, start_iter: 200 }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<(), MinerError> {
        if !(self.tr > 0.0 && self.tr < 1.0) {
            return Err(MinerError::Config(format!("tr must lie in (0,1), got {}", self.tr)));
        }
        if !(self.min_side >= 1.0) {
            return Err(MinerError::Config(format!("min_side must be >= 1, got {}", self.min_side)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(MinerError::Config(format!("nms_iou must lie in [0,1], got {}", self.nms_iou)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBox {
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
    pub source_iteration: u64,
}

/// A proposal in original image pixels with its background probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundCandidate {
    pub bbox: BBox,
    pub background_probability: f64,
}

/// Indices of the `k` most background-like proposals whose sides both exceed
/// `min_side`, most background-like first; ties keep proposal order.
pub fn select_background_proposals(candidates: &[BackgroundCandidate], k: usize, min_side: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b].background_probability.total_cmp(&candidates[a].background_probability).then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k)
        .filter(|&i| candidates[i].bbox.width() > min_side && candidates[i].bbox.height() > min_side)
        .collect()
}

/// Oracle vote over `label_space ∪ broad_names` for each box; a pseudo box is
/// emitted when a broad name wins with probability above `tr`. Oracle failures
/// on a single region are logged and skipped.
#[allow(clippy::too_many_arguments)]
pub fn identify(
    subset: &[BBox],
    image: &RgbImage,
    broad_names: &[String],
    label_space: &[String],
    oracle: &dyn EmbeddingOracle,
    oracle_config: &OracleConfig,
    template: &PromptTemplate,
    config: &MinerConfig,
    iteration: u64,
) -> Result<Vec<PseudoBox>, MinerError> {
    if subset.is_empty() || broad_names.is_empty() {
        return Ok(Vec::new());
    }
    let mut classes: Vec<String> = label_space.to_vec();
    for b in broad_names {
        if !classes.contains(b) {
            classes.push(b.clone());
        }
    }
    let prompts: Vec<String> = classes.iter().map(|c| template.apply(c)).collect();
    let texts = oracle.embed_texts(&prompts)?;
    let mut out = Vec::new();
    for bbox in subset {
        let region = match embed_image_region(oracle, image, bbox, oracle_config) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping mining region {bbox:?}: {e}");
                continue;
            }
        };
        let p = score_against(&region, &texts, oracle_config.score_temperature);
        let (best, &score) =
            p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).expect("classes");
        if broad_names.contains(&classes[best]) && score > config.tr {
            out.push(PseudoBox { bbox: *bbox, label: classes[best].clone(), score, source_iteration: iteration });
        }
    }
    Ok(out)
}

/// Per-image pseudo annotations. No two boxes of one image share a label and
/// overlap by more than `nms_iou`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStore {
    pub nms_iou: f64,
    entries: BTreeMap<String, Vec<PseudoBox>>,
}

impl PseudoStore {
    pub fn new(nms_iou: f64) -> Self {
        Self { nms_iou, entries: BTreeMap::new() }
    }

    pub fn get(&self, image_id: &str) -> Option<&[PseudoBox]> {
        self.entries.get(image_id).map(Vec::as_slice)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.contains_key(image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<PseudoBox>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges `boxes` into the image's list and re-applies per-label NMS.
    /// Existing boxes win score ties, so re-committing is a no-op. Committing
    /// nothing to an image without an entry leaves the store untouched.
    pub fn commit(&mut self, image_id: &str, boxes: Vec<PseudoBox>) {
        if boxes.is_empty() {
            return;
        }
        let mut merged = self.entries.get(image_id).cloned().unwrap_or_default();
        merged.extend(boxes);
        merged.sort_by(|a, b| a.label.cmp(&b.label).then(b.score.total_cmp(&a.score)));
        let mut kept = Vec::with_capacity(merged.len());
        let mut start = 0;
        while start < merged.len() {
            let end = start + merged[start..].iter().take_while(|b| b.label == merged[start].label).count();
            let group = &merged[start..end];
            let boxes: Vec<BBox> = group.iter().map(|b| b.bbox).collect();
            let scores: Vec<f64> = group.iter().map(|b| b.score).collect();
            let mut idx = nms(&boxes, &scores, self.nms_iou);
            idx.sort_unstable();
            kept.extend(idx.into_iter().map(|i| group[i].clone()));
            start = end;
        }
        self.entries.insert(image_id.to_string(), kept);
    }

    /// One box per distinct stored label, chosen uniformly under `seed`.
    pub fn sample_for_training(&self, image_id: &str, seed: u64) -> Vec<PseudoBox> {
        let Some(list) = self.entries.get(image_id) else {
            return Vec::new();
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::oracle::seed_of(&[image_id.as_bytes()]));
        let mut by_label: BTreeMap<&str, Vec<&PseudoBox>> = BTreeMap::new();
        for b in list {
            by_label.entry(&b.label).or_default().push(b);
        }
        by_label.values().map(|v| (*v.choose(&mut rng).expect("non-empty")).clone()).collect()
    }

    /// Distinct labels present anywhere in the store.
    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.values().flatten().map(|b| b.label.as_str()).collect()
    }

    /// Line-delimited text: one header line, then records sorted by
    /// `(image_id, label, -score)`.
    pub fn to_text(&self) -> Result<String, MinerError> {
        let mut out = format!("{HEADER}\tnms_iou={}\n", self.nms_iou);
        for (id, list) in &self.entries {
            check_field(id)?;
            let mut sorted: Vec<&PseudoBox> = list.iter().collect();
            sorted.sort_by(|a, b| a.label.cmp(&b.label).then(b.score.total_cmp(&a.score)));
            for b in sorted {
                check_field(&b.label)?;
                let r = &b.bbox;
                writeln!(
                    out,
                    "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.x1, r.y1, r.x2, r.y2, b.label, b.score, b.source_iteration
                )
                .expect("string write");
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self, MinerError> {
        let bad = |line: usize, reason: String| MinerError::Malformed { path: origin.to_string(), line, reason };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let nms_iou = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().strip_prefix("nms_iou="))
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| bad(1, format!("expected header {HEADER:?}")))?;
        let mut store = Self::new(nms_iou);
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad(n, format!("expected 8 tab-separated fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(n, format!("field {} is not a number: {:?}", k + 1, f[k])));
            let bbox = BBox::new(num(1)?, num(2)?, num(3)?, num(4)?);
            if !bbox.is_valid() {
                return Err(bad(n, format!("invalid box {bbox:?}")));
            }
            let score = num(6)?;
            let source_iteration =
                f[7].parse::<u64>().map_err(|_| bad(n, format!("bad source iteration {:?}", f[7])))?;
            store.entries.entry(f[0].to_string()).or_default().push(PseudoBox {
                bbox,
                label: f[5].to_string(),
                score,
                source_iteration,
            });
        }
        Ok(store)
    }

    pub fn persist(&self, path: &Path) -> Result<(), MinerError> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MinerError> {
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}

const HEADER: &str = "#clipiod-pseudo-store v1";

fn check_field(s: &str) -> Result<(), MinerError> {
    if s.contains(['\t', '\n', '\r']) || s.is_empty() {
        return Err(MinerError::Unstorable(s.to_string()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pb(label: &str, b: (f64, f64, f64, f64), score: f64) -> PseudoBox {
        PseudoBox { bbox: BBox::new(b.0, b.1, b.2, b.3), label: label.into(), score, source_iteration: 3 }
    }

    fn cand(side: f64, p: f64) -> BackgroundCandidate {
        BackgroundCandidate { bbox: BBox::new(0.0, 0.0, side, side), background_probability: p }
    }

    #[test]
    fn small_proposals_are_gated() {
        assert!(select_background_proposals(&[cand(50.0, 0.9), cand(50.0, 0.8)], 10, 100.0).is_empty());
        assert!(select_background_proposals(&[cand(100.0, 0.9)], 10, 100.0).is_empty());
    }

    #[test]
    fn top_k_by_background_probability() {
        let c = [cand(150.0, 0.3), cand(150.0, 0.9)];
        assert_eq!(select_background_proposals(&c, 1, 100.0), vec![1]);
        assert_eq!(select_background_proposals(&c, 5, 100.0), vec![1, 0]);
    }

    #[test]
    fn commit_applies_nms_and_is_idempotent() {
        let mut s = PseudoStore::new(0.5);
        let a = pb("animal", (0.0, 0.0, 100.0, 100.0), 0.9);
        let b = pb("animal", (0.0, 0.0, 100.0, 105.0), 0.8);
        let c = pb("animal", (200.0, 200.0, 300.0, 300.0), 0.75);
        s.commit("x", vec![a.clone(), b]);
        assert_eq!(s.get("x").unwrap(), &[a.clone()]);
        s.commit("x", vec![c.clone()]);
        let snapshot = s.clone();
        s.commit("x", vec![a, c]);
        assert_eq!(s, snapshot);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn empty_commit_creates_no_entry() {
        let mut s = PseudoStore::new(0.5);
        s.commit("x", vec![]);
        assert!(!s.contains("x"));
    }

    #[test]
    fn sampling_takes_one_box_per_label() {
        let mut s = PseudoStore::new(0.5);
        s.commit(
            "x",
            vec![
                pb("animal", (0.0, 0.0, 10.0, 10.0), 0.9),
                pb("animal", (20.0, 0.0, 30.0, 10.0), 0.8),
                pb("animal", (40.0, 0.0, 50.0, 10.0), 0.8),
                pb("vehicle", (0.0, 20.0, 10.0, 30.0), 0.95),
                pb("vehicle", (20.0, 20.0, 30.0, 30.0), 0.71),
            ],
        );
        let z = s.sample_for_training("x", 7);
        let labels: Vec<&str> = z.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["animal", "vehicle"]);
        assert_eq!(z, s.sample_for_training("x", 7));
        assert!(s.sample_for_training("nope", 7).is_empty());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let mut s = PseudoStore::new(0.5);
        s.commit("b", vec![pb("plant", (1.5, 2.25, 130.0, 140.1), 0.8123456789)]);
        s.commit("a", vec![pb("animal", (0.1, 0.2, 110.3, 120.7), 0.99), pb("animal", (150.0, 150.0, 300.0, 300.0), 0.7)]);
        let text = s.to_text().unwrap();
        assert_eq!(PseudoStore::from_text(&text, "mem").unwrap(), s);

        let empty = PseudoStore::new(0.5).to_text().unwrap();
        assert_eq!(empty.lines().count(), 1);
        assert!(PseudoStore::from_text(&empty, "mem").unwrap().is_empty());

        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "a\t1\t2\tthree\t4\tanimal\t0.9\t1";
        let err = PseudoStore::from_text(&lines.join("\n"), "store.tsv").unwrap_err();
        assert!(err.to_string().starts_with("store.tsv:3:"), "{err}");
    }
}
