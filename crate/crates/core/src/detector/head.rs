//! Projection to the text space, cosine classification and the head loss.

use serde::{Deserialize, Serialize};

use super::anchors::smooth_l1;
use super::{DetectorError, DetectorState, Linear};
use crate::oracle::{dot, l2_norm, softmax, EmbeddingVector};
use crate::text_space::TextEmbeddingBank;

/// Linear map of a region feature followed by L2 normalization.
pub fn project_roi(roi_feature: &[f64], state: &DetectorState) -> Result<EmbeddingVector, DetectorError> {
    if roi_feature.len() != state.projection.inp {
        return Err(DetectorError::DimensionMismatch { expected: state.projection.inp, got: roi_feature.len() });
    }
    let u = state.projection.apply(roi_feature);
    let n = l2_norm(&u);
    if !n.is_finite() || n <= f64::EPSILON {
        return Err(DetectorError::ZeroNorm);
    }
    Ok(EmbeddingVector { values: u.into_iter().map(|x| x / n).collect(), unit_norm: true })
}

/// Softmax over `logit_scale * cos(visual, row)` for every bank row, with the
/// background row last.
pub fn classify_cosine(
    visual: &EmbeddingVector,
    bank: &TextEmbeddingBank,
    state: &DetectorState,
) -> Result<Vec<f64>, DetectorError> {
    let rows = unit_rows(bank, state)?;
    let v = normalized(&visual.values)?;
    Ok(softmax(&logits(&v, &rows, state.logit_scale)))
}

/// Bank rows followed by the background row, each with its original norm.
pub(crate) struct UnitRows {
    pub rows: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
}

pub(crate) fn unit_rows(bank: &TextEmbeddingBank, state: &DetectorState) -> Result<UnitRows, DetectorError> {
    let d = state.embed_dim();
    let mut rows = Vec::with_capacity(bank.len() + 1);
    let mut norms = Vec::with_capacity(bank.len() + 1);
    for r in bank.rows.iter().chain(std::iter::once(&state.background_embedding)) {
        if r.len() != d {
            return Err(DetectorError::DimensionMismatch { expected: d, got: r.len() });
        }
        let n = l2_norm(r);
        if n <= f64::EPSILON {
            return Err(DetectorError::ZeroNorm);
        }
        rows.push(r.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok(UnitRows { rows, norms })
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, DetectorError> {
    let n = l2_norm(v);
    if !n.is_finite() || n <= f64::EPSILON {
        return Err(DetectorError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub(crate) fn logits(v: &[f64], rows: &UnitRows, scale: f64) -> Vec<f64> {
    rows.rows.iter().map(|r| scale * dot(v, r)).collect()
}

/// Per-ROI class probabilities (bank rows ++ background) from a region feature.
pub(crate) fn roi_probabilities(r: &[f64], rows: &UnitRows, state: &DetectorState) -> Vec<f64> {
    let u = state.projection.apply(r);
    let n = l2_norm(&u).max(1e-12);
    let v: Vec<f64> = u.iter().map(|x| x / n).collect();
    softmax(&logits(&v, rows, state.logit_scale))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetLabel {
    Background,
    Named(String),
}

/// Classification label plus, for real ground truth only, a regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    pub label: TargetLabel,
    pub regression: Option<[f64; 4]>,
}

/// Loss components; `total()` is their exact sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub reg: f64,
    pub rpn: f64,
    pub distill: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.rpn + self.distill
    }

    pub fn add(&mut self, o: &LossComponents) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.rpn += o.rpn;
        self.distill += o.distill;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { cls: self.cls * k, reg: self.reg * k, rpn: self.rpn * k, distill: self.distill * k }
    }
}

/// Gradients of [`detection_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    /// d loss / d roi feature, one per ROI.
    pub roi: Vec<Vec<f64>>,
    pub projection: Linear,
    pub regression: Linear,
    pub background: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

/// Mean cross-entropy over all ROIs plus smooth-L1 regression on the ROIs
/// carrying a regression target. The regression sum is divided by the number of
/// ROIs that are not pseudo-labelled (named but without a target), so adding
/// pseudo ROIs leaves it untouched.
pub fn detection_loss(
    roi_features: &[Vec<f64>],
    targets: &[RoiTarget],
    bank: &TextEmbeddingBank,
    state: &DetectorState,
) -> Result<(LossComponents, HeadGrad), DetectorError> {
    if roi_features.len() != targets.len() {
        return Err(DetectorError::DimensionMismatch { expected: roi_features.len(), got: targets.len() });
    }
    let rows = unit_rows(bank, state)?;
    let bg = bank.len();
    let classes: Vec<usize> = targets
        .iter()
        .map(|t| match &t.label {
            TargetLabel::Background => Ok(bg),
            TargetLabel::Named(n) => bank.index_of(n).ok_or_else(|| DetectorError::UnknownTarget(n.clone())),
        })
        .collect::<Result<_, _>>()?;

    let d = state.embed_dim();
    let mut grad = HeadGrad {
        roi: Vec::with_capacity(targets.len()),
        projection: state.projection.zeros_like(),
        regression: state.regression.zeros_like(),
        background: vec![0.0; d],
        rows: vec![vec![0.0; d]; bank.len()],
    };
    let mut loss = LossComponents::default();
    if targets.is_empty() {
        return Ok((loss, grad));
    }
    let n_roi = targets.len() as f64;
    let n_reg = targets
        .iter()
        .filter(|t| t.regression.is_some() || t.label == TargetLabel::Background)
        .count()
        .max(1) as f64;
    let s = state.logit_scale;
    let mut row_grad = vec![vec![0.0; d]; rows.rows.len()];

    for ((r, t), &y) in roi_features.iter().zip(targets).zip(&classes) {
        if r.len() != state.projection.inp {
            return Err(DetectorError::DimensionMismatch { expected: state.projection.inp, got: r.len() });
        }
        let u = state.projection.apply(r);
        let un = l2_norm(&u);
        if un <= f64::EPSILON {
            return Err(DetectorError::ZeroNorm);
        }
        let v: Vec<f64> = u.iter().map(|x| x / un).collect();
        let p = softmax(&logits(&v, &rows, s));
        loss.cls -= p[y].max(1e-300).ln() / n_roi;

        // d/d logits of mean CE, then through the cosine
        let mut dv = vec![0.0; d];
        for (c, pc) in p.iter().enumerate() {
            let dl = (pc - if c == y { 1.0 } else { 0.0 }) / n_roi;
            if dl == 0.0 {
                continue;
            }
            let rc = &rows.rows[c];
            for k in 0..d {
                dv[k] += s * dl * rc[k];
                row_grad[c][k] += s * dl * v[k];
            }
        }
        let vdv = dot(&v, &dv);
        let du: Vec<f64> = dv.iter().zip(&v).map(|(g, vk)| (g - vdv * vk) / un).collect();
        grad.projection.accumulate(r, &du);
        let mut dr = vec![0.0; r.len()];
        state.projection.backward_input(&du, &mut dr);

        if let Some(target) = t.regression {
            let pred = state.regression.apply(r);
            let mut dt = [0.0; 4];
            for k in 0..4 {
                let (l, g) = smooth_l1(pred[k] - target[k]);
                loss.reg += l / n_reg;
                dt[k] = g / n_reg;
            }
            grad.regression.accumulate(r, &dt);
            state.regression.backward_input(&dt, &mut dr);
        }
        grad.roi.push(dr);
    }

    // project row gradients onto the tangent of each normalized row
    for (c, g) in row_grad.iter().enumerate() {
        let rc = &rows.rows[c];
        let gr = dot(g, rc);
        let out: Vec<f64> = g.iter().zip(rc).map(|(gk, rk)| (gk - gr * rk) / rows.norms[c]).collect();
        if c == bg {
            grad.background = out;
        } else {
            grad.rows[c] = out;
        }
    }
    Ok((loss, grad))
}

/// Head outputs compared under ROI distillation: the cosine logits over
/// `classes` (row indices, background = `rows.rows.len() - 1`) with their mean
/// removed, followed by the four regression deltas.
pub(crate) fn roi_outputs(
    r: &[f64],
    rows: &UnitRows,
    classes: &[usize],
    state: &DetectorState,
) -> Result<Vec<f64>, DetectorError> {
    let v = normalized(&state.projection.apply(r))?;
    let z: Vec<f64> = classes.iter().map(|&c| state.logit_scale * dot(&v, &rows.rows[c])).collect();
    let mean = z.iter().sum::<f64>() / z.len().max(1) as f64;
    let mut out: Vec<f64> = z.into_iter().map(|x| x - mean).collect();
    out.extend(state.regression.apply(r));
    Ok(out)
}

/// Back-propagates `d_out` (shaped like [`roi_outputs`]) into `grad` and `dr`.
/// Row and background gradients are tangent to the normalized rows.
pub(crate) fn roi_outputs_backward(
    r: &[f64],
    rows: &UnitRows,
    classes: &[usize],
    state: &DetectorState,
    d_out: &[f64],
    grad: &mut HeadGrad,
    dr: &mut [f64],
) {
    let m = classes.len();
    let (dz, dd) = d_out.split_at(m);
    let dz_mean = dz.iter().sum::<f64>() / m.max(1) as f64;
    let u = state.projection.apply(r);
    let un = l2_norm(&u);
    let v: Vec<f64> = u.iter().map(|x| x / un).collect();
    let s = state.logit_scale;
    let d = v.len();
    let bg = rows.rows.len() - 1;
    let mut dv = vec![0.0; d];
    for (&c, g) in classes.iter().zip(dz) {
        let g = s * (g - dz_mean);
        let rc = &rows.rows[c];
        let gr: f64 = dot(&v, rc);
        let target = if c == bg { &mut grad.background } else { &mut grad.rows[c] };
        for k in 0..d {
            dv[k] += g * rc[k];
            target[k] += g * (v[k] - gr * rc[k]) / rows.norms[c];
        }
    }
    let vdv = dot(&v, &dv);
    let du: Vec<f64> = dv.iter().zip(&v).map(|(g, vk)| (g - vdv * vk) / un).collect();
    grad.projection.accumulate(r, &du);
    state.projection.backward_input(&du, dr);
    grad.regression.accumulate(r, dd);
    state.regression.backward_input(dd, dr);
}
