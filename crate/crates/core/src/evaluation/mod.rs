//! IoU/NMS primitives, VOC-style AP and the base/novel/all mAP report.

mod ap;
mod geometry;
mod report;

pub use ap::{average_precision, pr_curve, voc07_ap, ApMode, DetectionResult, GtBox};
pub use geometry::{iou, nms, BBox};
pub use report::{map_report, ApReport, ClassAp, LabeledGt, Split, Stage};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("detection label '{0}' is not an evaluated class")]
    UnknownLabel(String),
}
