//! Per-class average precision in the PASCAL VOC style.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::geometry::BBox;

/// One scored detection emitted by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub label: String,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground-truth box reduced to what matching needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image_id: String,
    pub bbox: BBox,
    pub difficult: bool,
}

/// How the precision/recall curve is integrated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// VOC2007: mean of the interpolated precision at recall 0.0, 0.1, ..., 1.0.
    #[default]
    Voc11Point,
    /// VOC2010+: area under the monotone precision envelope.
    Area,
}

impl std::str::FromStr for ApMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "voc11" | "voc11_point" | "11point" => Ok(ApMode::Voc11Point),
            "area" => Ok(ApMode::Area),
            other => Err(format!("unknown ap mode '{other}' (expected voc11 or area)")),
        }
    }
}

/// Cumulative recall/precision after each detection, in score order.
///
/// Detections matching a difficult GT are skipped entirely. Returns `None`
/// when there are no non-difficult ground-truth boxes.
pub fn pr_curve(
    dets: &[DetectionResult],
    gts: &[GtBox],
    iou_thr: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let npos = gts.iter().filter(|g| !g.difficult).count();
    if npos == 0 {
        return None;
    }
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_image.get(det.image_id.as_str()) {
            for &g in cands {
                let ov = det.bbox.iou(&gts[g].bbox);
                if best.is_none_or(|(_, b)| ov > b) {
                    best = Some((g, ov));
                }
            }
        }
        match best {
            Some((g, ov)) if ov > iou_thr => {
                if gts[g].difficult {
                    continue;
                }
                if matched[g] {
                    fp += 1;
                } else {
                    matched[g] = true;
                    tp += 1;
                }
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some((recall, precision))
}

/// VOC2007 11-point interpolated AP at the given IoU threshold.
pub fn voc07_ap(dets: &[DetectionResult], gts: &[GtBox], iou_thr: f64) -> f64 {
    average_precision(dets, gts, iou_thr, ApMode::Voc11Point)
}

pub fn average_precision(
    dets: &[DetectionResult],
    gts: &[GtBox],
    iou_thr: f64,
    mode: ApMode,
) -> f64 {
    let Some((rec, prec)) = pr_curve(dets, gts, iou_thr) else {
        return 0.0;
    };
    match mode {
        ApMode::Voc11Point => {
            let mut total = 0.0;
            for level in 0..=10 {
                let t = level as f64 / 10.0;
                let p = rec
                    .iter()
                    .zip(&prec)
                    .filter(|(r, _)| **r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
        ApMode::Area => {
            let mut mrec = Vec::with_capacity(rec.len() + 2);
            let mut mpre = Vec::with_capacity(prec.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(&rec);
            mrec.push(1.0);
            mpre.push(0.0);
            mpre.extend_from_slice(&prec);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    }
}
