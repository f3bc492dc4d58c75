use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ap::{average_precision, ApMode, DetectionResult, GtBox};
use super::geometry::BBox;
use super::EvalError;
use crate::registry::ClassRegistry;

/// Which incremental stage a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "T1")]
    Task1,
    #[serde(rename = "T2")]
    Task2,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Task1 => "T1",
            Stage::Task2 => "T2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
}

/// Ground truth with its class label, as consumed by [`map_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGt {
    pub image_id: String,
    pub label: String,
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    pub split: Split,
    pub ap: f64,
    /// False when the test split holds no non-difficult box of this class.
    pub evaluated: bool,
}

/// Per-class AP@50 with base, novel and overall means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub stage: Stage,
    pub ap_mode: ApMode,
    pub iou_threshold: f64,
    pub per_class_ap: Vec<ClassAp>,
    pub map_all: f64,
    pub map_base: f64,
    pub map_novel: f64,
    pub note: String,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates detections against ground truth over `base ++ novel`.
///
/// Classes without ground truth are reported but left out of every mean.
pub fn map_report(
    dets: &[DetectionResult],
    gts: &[LabeledGt],
    registry: &ClassRegistry,
    stage: Stage,
    mode: ApMode,
    note: &str,
) -> Result<ApReport, EvalError> {
    let classes = registry.all_classes();
    let mut det_by: HashMap<&str, Vec<DetectionResult>> = HashMap::new();
    for d in dets {
        if !classes.contains(&d.label) {
            return Err(EvalError::UnknownLabel(d.label.clone()));
        }
        det_by.entry(d.label.as_str()).or_default().push(d.clone());
    }
    let mut gt_by: HashMap<&str, Vec<GtBox>> = HashMap::new();
    for g in gts {
        gt_by.entry(g.label.as_str()).or_default().push(GtBox {
            image_id: g.image_id.clone(),
            bbox: g.bbox,
            difficult: g.difficult,
        });
    }
    let iou_threshold = 0.5;
    let mut per_class_ap = Vec::with_capacity(classes.len());
    for name in &classes {
        let cls_gts = gt_by.get(name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let cls_dets = det_by.get(name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let evaluated = cls_gts.iter().any(|g| !g.difficult);
        if !evaluated {
            log::warn!("class '{name}' has no ground truth in the test split; excluded from means");
        }
        per_class_ap.push(ClassAp {
            name: name.clone(),
            split: if registry.is_base(name) { Split::Base } else { Split::Novel },
            ap: average_precision(cls_dets, cls_gts, iou_threshold, mode),
            evaluated,
        });
    }
    let evaluated = || per_class_ap.iter().filter(|c| c.evaluated);
    let map_all = mean(evaluated().map(|c| c.ap));
    let map_base = mean(evaluated().filter(|c| c.split == Split::Base).map(|c| c.ap));
    let map_novel = mean(evaluated().filter(|c| c.split == Split::Novel).map(|c| c.ap));
    Ok(ApReport {
        stage,
        ap_mode: mode,
        iou_threshold,
        per_class_ap,
        map_all,
        map_base,
        map_novel,
        note: note.to_string(),
    })
}

impl ApReport {
    /// Class-wise AP row (novel classes starred) followed by the base/novel/all summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mode = match self.ap_mode {
            ApMode::Voc11Point => "voc07 11-point",
            ApMode::Area => "area",
        };
        let _ = writeln!(out, "# stage {} | AP@{} ({mode})", self.stage.tag(), self.iou_threshold);
        if !self.note.is_empty() {
            let _ = writeln!(out, "# {}", self.note);
        }
        let width = self.per_class_ap.iter().map(|c| c.name.len() + 1).max().unwrap_or(6).max(6);
        let mut header = String::new();
        let mut values = String::new();
        for c in &self.per_class_ap {
            let name = if c.split == Split::Novel { format!("{}*", c.name) } else { c.name.clone() };
            let _ = write!(header, "{name:>width$} ");
            let v = if c.evaluated { format!("{:.2}", c.ap * 100.0) } else { "-".to_string() };
            let _ = write!(values, "{v:>width$} ");
        }
        let _ = writeln!(out, "{}", header.trim_end());
        let _ = writeln!(out, "{}", values.trim_end());
        let _ = writeln!(out, "{:>8} {:>8} {:>8}", "base", "novel", "all");
        let _ = writeln!(
            out,
            "{:>8.2} {:>8.2} {:>8.2}",
            self.map_base * 100.0,
            self.map_novel * 100.0,
            self.map_all * 100.0
        );
        out
    }

    /// One JSON object per class, one per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.per_class_ap {
            let rec = serde_json::json!({
                "stage": self.stage.tag(),
                "class": c.name,
                "split": c.split,
                "ap": c.ap,
                "evaluated": c.evaluated,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> ClassRegistry {
        ClassRegistry {
            base_names: vec!["a".into(), "b".into()],
            novel_names: vec!["c".into()],
            broad_names: vec!["z".into()],
            setting_id: "synthetic".into(),
        }
    }

    fn gts() -> Vec<LabeledGt> {
        let mk = |img: &str, label: &str, x: f64| LabeledGt {
            image_id: img.into(),
            label: label.into(),
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            difficult: false,
        };
        vec![mk("i0", "a", 0.0), mk("i0", "b", 20.0), mk("i1", "c", 0.0), mk("i1", "a", 40.0)]
    }

    #[test]
    fn perfect_detections() {
        let dets: Vec<_> = gts()
            .into_iter()
            .map(|g| DetectionResult { image_id: g.image_id, label: g.label, score: 0.9, bbox: g.bbox })
            .collect();
        let r = map_report(&dets, &gts(), &registry(), Stage::Task2, ApMode::Voc11Point, "").unwrap();
        assert!(r.per_class_ap.iter().all(|c| (c.ap - 1.0).abs() < 1e-12));
        assert!((r.map_all - 1.0).abs() < 1e-12);
        assert!((r.map_base - 1.0).abs() < 1e-12);
        assert!((r.map_novel - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections() {
        let r = map_report(&[], &gts(), &registry(), Stage::Task1, ApMode::Voc11Point, "").unwrap();
        assert!(r.per_class_ap.iter().all(|c| c.ap == 0.0));
        assert_eq!(r.map_all, 0.0);
    }

    #[test]
    fn unknown_label_rejected() {
        let d = DetectionResult { image_id: "i0".into(), label: "z".into(), score: 0.5, bbox: BBox::new(0.0, 0.0, 1.0, 1.0) };
        assert_eq!(
            map_report(&[d], &gts(), &registry(), Stage::Task1, ApMode::Voc11Point, ""),
            Err(EvalError::UnknownLabel("z".into()))
        );
    }

    #[test]
    fn class_without_gt_excluded_from_means() {
        let g: Vec<_> = gts().into_iter().filter(|g| g.label != "c").collect();
        let dets: Vec<_> = g
            .iter()
            .map(|g| DetectionResult { image_id: g.image_id.clone(), label: g.label.clone(), score: 0.9, bbox: g.bbox })
            .collect();
        let r = map_report(&dets, &g, &registry(), Stage::Task2, ApMode::Voc11Point, "").unwrap();
        assert!(!r.per_class_ap[2].evaluated);
        assert_eq!(r.map_all, 1.0);
        assert_eq!(r.map_novel, 0.0);
    }

    #[test]
    fn table_has_summary_row() {
        let r = map_report(&[], &gts(), &registry(), Stage::Task1, ApMode::Voc11Point, "n").unwrap();
        let t = r.to_table();
        assert!(t.contains("c*"));
        assert!(t.lines().last().unwrap().contains("0.00"));
        assert_eq!(r.to_jsonl().lines().count(), 3);
    }
}
