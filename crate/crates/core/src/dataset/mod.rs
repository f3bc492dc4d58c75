//! Image records, VOC-layout I/O, the synthetic shapes set and per-task filtering.

mod synthetic;
mod voc;

use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{BBox, LabeledGt};
use crate::registry::TaskSpec;

pub use synthetic::{
    default_synthetic_classes, generate_synthetic, ClassRecipe, ShapeKind, SyntheticConfig, SyntheticDataset,
};
pub use voc::{load_voc, write_voc};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed annotation {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("annotation {path} references unknown label '{label}'")]
    UnknownLabel { path: PathBuf, label: String },
    #[error("unsatisfiable synthetic layout: {0}")]
    Layout(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("image decode failed for {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labelled ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub bbox: BBox,
    pub label: String,
    pub difficult: bool,
}

/// Where an image's pixels live.
#[derive(Debug, Clone)]
pub enum PixelSource {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl PartialEq for PixelSource {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PixelSource::Path(a), PixelSource::Path(b)) => a == b,
            (PixelSource::Memory(a), PixelSource::Memory(b)) => Arc::ptr_eq(a, b) || a.as_raw() == b.as_raw(),
            _ => false,
        }
    }
}

impl PixelSource {
    pub fn load(&self) -> Result<Arc<RgbImage>, DatasetError> {
        match self {
            PixelSource::Memory(img) => Ok(Arc::clone(img)),
            PixelSource::Path(p) => {
                if !p.exists() {
                    return Err(DatasetError::MissingFile(p.clone()));
                }
                let img = image::open(p)
                    .map_err(|e| DatasetError::Image { path: p.clone(), reason: e.to_string() })?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<AnnotatedBox>,
    pub pixel_source: PixelSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSplit {
    Trainval,
    Test,
}

impl DataSplit {
    pub fn file_stem(&self) -> &'static str {
        match self {
            DataSplit::Trainval => "trainval",
            DataSplit::Test => "test",
        }
    }
}

/// An ordered set of images, optionally restricted to one task's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView {
    pub records: Vec<ImageRecord>,
    pub task: Option<TaskSpec>,
    pub split: DataSplit,
}

impl DatasetView {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Flattens every box into evaluation ground truth.
    pub fn ground_truth(&self) -> Vec<LabeledGt> {
        self.records
            .iter()
            .flat_map(|r| {
                r.boxes.iter().map(move |b| LabeledGt {
                    image_id: r.image_id.clone(),
                    label: b.label.clone(),
                    bbox: b.bbox,
                    difficult: b.difficult,
                })
            })
            .collect()
    }
}

/// Keeps images with at least one box of a visible class and strips every
/// other box from them. The input view is not modified.
pub fn filter_for_task(view: &DatasetView, task: &TaskSpec) -> DatasetView {
    let records = view
        .records
        .iter()
        .filter_map(|r| {
            let boxes: Vec<AnnotatedBox> =
                r.boxes.iter().filter(|b| task.is_visible(&b.label)).cloned().collect();
            if boxes.is_empty() {
                None
            } else {
                Some(ImageRecord { boxes, ..r.clone() })
            }
        })
        .collect();
    DatasetView { records, task: Some(task.clone()), split: view.split }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{build_schedule, Setting, DEFAULT_BROAD_15_5};

    fn rec(id: &str, labels: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 100,
            height: 100,
            boxes: labels
                .iter()
                .enumerate()
                .map(|(i, l)| AnnotatedBox {
                    bbox: BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0),
                    label: l.to_string(),
                    difficult: false,
                })
                .collect(),
            pixel_source: PixelSource::Path(PathBuf::from(format!("{id}.png"))),
        }
    }

    fn task1() -> TaskSpec {
        let broad: Vec<String> = DEFAULT_BROAD_15_5.iter().map(|s| s.to_string()).collect();
        build_schedule(&Setting::voc("15+5").unwrap(), &broad).unwrap().task1().clone()
    }

    #[test]
    fn filter_keeps_visible_boxes_only() {
        let view = DatasetView {
            records: vec![rec("a", &["cow", "sofa"]), rec("b", &["sofa"])],
            task: None,
            split: DataSplit::Trainval,
        };
        let t1 = task1();
        let out = filter_for_task(&view, &t1);
        assert_eq!(out.len(), 1);
        assert_eq!(out.records[0].image_id, "a");
        assert_eq!(out.records[0].boxes.len(), 1);
        assert_eq!(out.records[0].boxes[0].label, "cow");
        // input untouched
        assert_eq!(view.records[0].boxes.len(), 2);
        assert_eq!(filter_for_task(&out, &t1), out);
    }

    #[test]
    fn filter_empty_view() {
        let view = DatasetView { records: vec![], task: None, split: DataSplit::Trainval };
        assert!(filter_for_task(&view, &task1()).is_empty());
    }
}
