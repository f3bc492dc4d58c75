//! Full forward/backward pass for one image, proposal generation and inference.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{decode, encode};
use super::distill::{distill_losses, DistillConfig, DistillTarget};
use super::features::{pool, pool_backward, stem, FeatureMap, Integral, STEM_DIM};
use super::head::{detection_loss, roi_probabilities, unit_rows, LossComponents, RoiTarget, TargetLabel};
use super::{DetectorError, DetectorState, Gradients};
use crate::evaluation::{nms, BBox, DetectionResult};
use crate::text_space::TextEmbeddingBank;

/// Scale between an original image and the square detector input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputFrame {
    pub sx: f64,
    pub sy: f64,
}

impl InputFrame {
    pub fn new(width: u32, height: u32, input_size: u32) -> Self {
        Self { sx: input_size as f64 / width as f64, sy: input_size as f64 / height as f64 }
    }

    pub fn to_input(&self, b: &BBox) -> BBox {
        BBox::new(b.x1 * self.sx, b.y1 * self.sy, b.x2 * self.sx, b.y2 * self.sy)
    }

    pub fn to_original(&self, b: &BBox) -> BBox {
        BBox::new(b.x1 / self.sx, b.y1 / self.sy, b.x2 / self.sx, b.y2 / self.sy)
    }
}

/// Stem of `image` resized to the detector input frame.
pub fn prepare_stem(image: &RgbImage, state: &DetectorState) -> (FeatureMap, InputFrame) {
    let cfg = &state.config;
    let frame = InputFrame::new(image.width(), image.height(), cfg.input_size);
    if image.width() == cfg.input_size && image.height() == cfg.input_size {
        return (stem(image, cfg.cell), frame);
    }
    let resized =
        image::imageops::resize(image, cfg.input_size, cfg.input_size, image::imageops::FilterType::Triangle);
    (stem(&resized, cfg.cell), frame)
}

/// Post-ReLU trunk map and its integral image.
pub struct TrunkOut {
    pub map: FeatureMap,
    pub integral: Integral,
}

pub fn trunk_forward(state: &DetectorState, stem_map: &FeatureMap) -> TrunkOut {
    let h = state.backbone.out;
    let mut map = FeatureMap::zeros(stem_map.gw, stem_map.gh, h);
    for (src, dst) in stem_map.data.chunks_exact(STEM_DIM).zip(map.data.chunks_exact_mut(h)) {
        state.backbone.forward(src, dst);
        dst.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let integral = Integral::new(&map);
    TrunkOut { map, integral }
}

fn pooled(state: &DetectorState, trunk: &TrunkOut, b: &BBox) -> Vec<f64> {
    let mut x = vec![0.0; state.config.pooled_dim()];
    pool(&trunk.integral, b, state.config.cell as f64, &mut x);
    x
}

/// A candidate region with its objectness logit and pooled region feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub roi_feature: Vec<f64>,
}

/// A proposal with head outputs: probabilities over bank rows ++ background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    pub probabilities: Vec<f64>,
    pub deltas: [f64; 4],
}

impl ScoredProposal {
    pub fn background_probability(&self) -> f64 {
        *self.probabilities.last().expect("background row")
    }
}

fn objectness_all(state: &DetectorState, trunk: &TrunkOut, anchors: &[BBox]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs: Vec<Vec<f64>> = anchors.iter().map(|a| pooled(state, trunk, a)).collect();
    let scores = xs.iter().map(|x| state.rpn.apply(x)[0]).collect();
    (xs, scores)
}

/// Indices of the `keep` best anchors after top-k and NMS.
fn select_proposals(anchors: &[BBox], scores: &[f64], top: usize, nms_iou: f64, keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top);
    let boxes: Vec<BBox> = order.iter().map(|&i| anchors[i]).collect();
    let sc: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let mut kept: Vec<usize> = nms(&boxes, &sc, nms_iou).into_iter().map(|k| order[k]).collect();
    kept.truncate(keep);
    kept
}

/// Proposals for an image stem, best objectness first.
pub fn propose(state: &DetectorState, stem_map: &FeatureMap, keep: usize) -> Vec<Proposal> {
    let cfg = &state.config;
    let anchors = cfg.anchors();
    let trunk = trunk_forward(state, stem_map);
    let (xs, scores) = objectness_all(state, &trunk, &anchors);
    select_proposals(&anchors, &scores, cfg.pre_nms_top, cfg.proposal_nms, keep)
        .into_iter()
        .map(|i| Proposal { bbox: anchors[i], objectness: scores[i], roi_feature: roi_forward(state, &xs[i]).1 })
        .collect()
}

/// Pre-activation and post-ReLU region feature.
fn roi_forward(state: &DetectorState, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = state.roi_head.apply(x);
    let r = h.iter().map(|v| v.max(0.0)).collect();
    (h, r)
}

/// Test-mode proposals with head outputs, in input-frame coordinates.
pub fn score_proposals(
    state: &DetectorState,
    bank: &TextEmbeddingBank,
    stem_map: &FeatureMap,
) -> Result<Vec<ScoredProposal>, DetectorError> {
    let rows = unit_rows(bank, state)?;
    Ok(propose(state, stem_map, state.config.test_proposals)
        .into_iter()
        .map(|p| {
            let probabilities = roi_probabilities(&p.roi_feature, &rows, state);
            let d = state.regression.apply(&p.roi_feature);
            ScoredProposal { deltas: [d[0], d[1], d[2], d[3]], proposal: p, probabilities }
        })
        .collect())
}

/// Detections for a precomputed stem; boxes are mapped back through `frame`.
pub fn infer_stem(
    state: &DetectorState,
    bank: &TextEmbeddingBank,
    stem_map: &FeatureMap,
    frame: &InputFrame,
    image_id: &str,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<DetectionResult>, DetectorError> {
    let size = state.config.input_size as f64;
    let bg = bank.len();
    let mut per_class: BTreeMap<usize, (Vec<BBox>, Vec<f64>)> = BTreeMap::new();
    for sp in score_proposals(state, bank, stem_map)? {
        let (c, &p) = sp
            .probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        if c == bg || p < score_threshold {
            continue;
        }
        let b = decode(&sp.proposal.bbox, &sp.deltas).clamp_to(size, size);
        if !b.is_valid() {
            continue;
        }
        let e = per_class.entry(c).or_default();
        e.0.push(b);
        e.1.push(p);
    }
    let mut out = Vec::new();
    for (c, (boxes, scores)) in per_class {
        for k in nms(&boxes, &scores, nms_iou) {
            out.push(DetectionResult {
                image_id: image_id.to_string(),
                label: bank.row_name(c).to_string(),
                score: scores[k],
                bbox: frame.to_original(&boxes[k]),
            });
        }
    }
    Ok(out)
}

/// Runs the detector on an image; background predictions are discarded.
pub fn infer(
    image: &RgbImage,
    image_id: &str,
    bank: &TextEmbeddingBank,
    state: &DetectorState,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<DetectionResult>, DetectorError> {
    let (s, frame) = prepare_stem(image, state);
    infer_stem(state, bank, &s, &frame, image_id, score_threshold, nms_iou)
}

/// Renames labels through `rename` (unlisted labels pass through, labels
/// mapped to `None` are dropped) and re-applies per-label NMS per image.
pub fn relabel_detections(
    dets: Vec<DetectionResult>,
    rename: &BTreeMap<String, Option<String>>,
    nms_iou: f64,
) -> Vec<DetectionResult> {
    let mut groups: BTreeMap<(String, String), Vec<DetectionResult>> = BTreeMap::new();
    for mut d in dets {
        match rename.get(&d.label) {
            Some(None) => continue,
            Some(Some(n)) => d.label = n.clone(),
            None => {}
        }
        groups.entry((d.image_id.clone(), d.label.clone())).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, g) in groups {
        let boxes: Vec<BBox> = g.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = g.iter().map(|d| d.score).collect();
        for k in nms(&boxes, &scores, nms_iou) {
            out.push(g[k].clone());
        }
    }
    out
}

/// Boxes for one training image in the input frame.
#[derive(Debug, Clone, Default)]
pub struct ImageTargets {
    pub gt: Vec<(BBox, String)>,
    pub pseudo: Vec<(BBox, String)>,
}

/// Frozen previous-stage model used for distillation.
///
/// `bank` holds the teacher's own rows for the classes whose head outputs are
/// distilled; every name must also be a row of the student bank.
#[derive(Clone, Copy)]
pub struct TeacherView<'a> {
    pub state: &'a DetectorState,
    pub bank: &'a TextEmbeddingBank,
    pub config: &'a DistillConfig,
}

#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub loss: LossComponents,
    /// Unit visual embedding of every ground-truth box, with its label.
    pub gt_embeddings: Vec<(String, Vec<f64>)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, with its derivative.
fn bce(logit: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    let y = if positive { 1.0 } else { 0.0 };
    // log(1 + e^-|x|) + max(x, 0) - x*y
    let l = (-logit.abs()).exp().ln_1p() + logit.max(0.0) - logit * y;
    (l, p - y)
}

fn max_iou(b: &BBox, targets: &[BBox]) -> (f64, usize) {
    targets.iter().enumerate().fold((0.0, usize::MAX), |(best, bi), (i, t)| {
        let v = b.iou(t);
        if v > best {
            (v, i)
        } else {
            (best, bi)
        }
    })
}

/// Anchor indices and labels for the objectness loss.
fn sample_rpn(
    state: &DetectorState,
    anchors: &[BBox],
    targets: &[BBox],
    rng: &mut impl Rng,
) -> Vec<(usize, bool)> {
    let cfg = &state.config;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut forced = vec![false; anchors.len()];
    for t in targets {
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (a.iou(t), i))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((v, i)) = best {
            if v > 0.0 {
                forced[i] = true;
            }
        }
    }
    for (i, a) in anchors.iter().enumerate() {
        let (v, _) = max_iou(a, targets);
        if forced[i] || v >= cfg.rpn_pos_iou {
            pos.push(i);
        } else if v < cfg.rpn_neg_iou {
            neg.push(i);
        }
    }
    let n_pos = ((cfg.rpn_batch as f64 * cfg.rpn_pos_fraction) as usize).min(pos.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_neg = (cfg.rpn_batch - n_pos).min(neg.len());
    pos[..n_pos].iter().map(|&i| (i, true)).chain(neg[..n_neg].iter().map(|&i| (i, false))).collect()
}

/// Sampled regions and their head targets. Ground-truth boxes come first.
fn sample_rois(
    state: &DetectorState,
    proposals: &[BBox],
    targets: &ImageTargets,
    rng: &mut impl Rng,
) -> (Vec<BBox>, Vec<RoiTarget>) {
    let cfg = &state.config;
    let all: Vec<(BBox, &str, bool)> = targets
        .gt
        .iter()
        .map(|(b, l)| (*b, l.as_str(), true))
        .chain(targets.pseudo.iter().map(|(b, l)| (*b, l.as_str(), false)))
        .collect();
    let boxes: Vec<BBox> = all.iter().map(|t| t.0).collect();
    let label_for = |b: &BBox, k: usize| {
        let (bx, name, real) = all[k];
        RoiTarget {
            label: TargetLabel::Named(name.to_string()),
            regression: real.then(|| encode(b, &bx)),
        }
    };

    let mut rois: Vec<BBox> = Vec::new();
    let mut tgts: Vec<RoiTarget> = Vec::new();
    for (k, (b, _, _)) in all.iter().enumerate() {
        rois.push(*b);
        tgts.push(label_for(b, k));
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for p in proposals {
        let (v, k) = max_iou(p, &boxes);
        if v >= cfg.roi_fg_iou {
            fg.push((*p, k));
        } else {
            bg.push(*p);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let fg_cap = ((cfg.roi_batch as f64 * cfg.roi_fg_fraction) as usize).max(rois.len());
    for (p, k) in fg.into_iter().take(fg_cap.saturating_sub(rois.len())) {
        rois.push(p);
        tgts.push(label_for(&p, k));
    }
    for p in bg.into_iter().take(cfg.roi_batch.saturating_sub(rois.len())) {
        rois.push(p);
        tgts.push(RoiTarget { label: TargetLabel::Background, regression: None });
    }
    (rois, tgts)
}

/// One image's forward and backward pass. Parameter gradients are added into
/// `grad` multiplied by `weight`; bank-row gradients likewise.
#[allow(clippy::too_many_arguments)]
pub fn train_image(
    state: &DetectorState,
    bank: &TextEmbeddingBank,
    stem_map: &FeatureMap,
    targets: &ImageTargets,
    teacher: Option<TeacherView<'_>>,
    rng: &mut impl Rng,
    grad: &mut Gradients,
    weight: f64,
) -> Result<StepOutput, DetectorError> {
    let cfg = &state.config;
    let cell = cfg.cell as f64;
    let anchors = cfg.anchors();
    let trunk = trunk_forward(state, stem_map);
    let (anchor_x, scores) = objectness_all(state, &trunk, &anchors);
    let mut d_map = FeatureMap::zeros(trunk.map.gw, trunk.map.gh, trunk.map.ch);
    let mut loss = LossComponents::default();

    // proposal stage
    let mut rpn_targets: Vec<BBox> = targets.gt.iter().map(|t| t.0).collect();
    if cfg.pseudo_to_rpn {
        rpn_targets.extend(targets.pseudo.iter().map(|t| t.0));
    }
    let sampled = sample_rpn(state, &anchors, &rpn_targets, rng);
    let n_rpn = sampled.len().max(1) as f64;
    for &(i, positive) in &sampled {
        let (l, g) = bce(scores[i], positive);
        loss.rpn += l / n_rpn;
        let g = g / n_rpn * weight;
        grad.rpn.accumulate(&anchor_x[i], &[g]);
        let dx: Vec<f64> = state.rpn.w.iter().map(|w| w * g).collect();
        pool_backward(&anchors[i], cell, &dx, &mut d_map);
    }

    // head
    let prop_idx = select_proposals(&anchors, &scores, cfg.pre_nms_top, cfg.proposal_nms, cfg.train_proposals);
    let proposals: Vec<BBox> = prop_idx.iter().map(|&i| anchors[i]).collect();
    let (rois, roi_targets) = sample_rois(state, &proposals, targets, rng);
    let xs: Vec<Vec<f64>> = rois.iter().map(|b| pooled(state, &trunk, b)).collect();
    let (hs, rs): (Vec<Vec<f64>>, Vec<Vec<f64>>) = xs.iter().map(|x| roi_forward(state, x)).unzip();
    let (head_loss, mut head_grad) = detection_loss(&rs, &roi_targets, bank, state)?;
    loss.cls = head_loss.cls;
    loss.reg = head_loss.reg;
    let mut d_r = std::mem::take(&mut head_grad.roi);

    let gt_embeddings = targets
        .gt
        .iter()
        .enumerate()
        .filter_map(|(k, (_, l))| super::project_roi(&rs[k], state).ok().map(|e| (l.clone(), e.values)))
        .collect();

    if let Some(t) = teacher.filter(|t| t.config.weight != 0.0) {
        let t_trunk = trunk_forward(t.state, stem_map);
        let t_rows = unit_rows(t.bank, t.state)?;
        let t_classes: Vec<usize> = (0..=t.bank.len()).collect();
        let mut s_classes = t
            .bank
            .names
            .iter()
            .map(|n| bank.index_of(n).ok_or_else(|| DetectorError::UnknownTarget(n.clone())))
            .collect::<Result<Vec<usize>, _>>()?;
        s_classes.push(bank.len());
        let s_rows = unit_rows(bank, state)?;
        let mut t_out = Vec::new();
        let mut s_out = Vec::new();
        for (b, r) in rois.iter().zip(&rs) {
            let t_r = roi_forward(t.state, &pooled(t.state, &t_trunk, b)).1;
            t_out.extend(super::head::roi_outputs(&t_r, &t_rows, &t_classes, t.state)?);
            s_out.extend(super::head::roi_outputs(r, &s_rows, &s_classes, state)?);
        }
        let (l, g) = distill_losses(
            &[(DistillTarget::Backbone, &trunk.map.data), (DistillTarget::Roi, &s_out)],
            &[(DistillTarget::Backbone, &t_trunk.map.data), (DistillTarget::Roi, &t_out)],
            t.config,
        )?;
        loss.distill = l;
        for (d, g) in d_map.data.iter_mut().zip(&g[0]) {
            *d += g * weight;
        }
        let width = s_classes.len() + 4;
        for (k, r) in rs.iter().enumerate() {
            let dk = &g[1][k * width..(k + 1) * width];
            if dk.iter().any(|v| *v != 0.0) {
                super::head::roi_outputs_backward(r, &s_rows, &s_classes, state, dk, &mut head_grad, &mut d_r[k]);
            }
        }
    }

    // parameter gradients of the head
    let axpy = |dst: &mut Vec<f64>, src: &[f64]| dst.iter_mut().zip(src).for_each(|(a, b)| *a += weight * b);
    axpy(&mut grad.projection.w, &head_grad.projection.w);
    axpy(&mut grad.projection.b, &head_grad.projection.b);
    axpy(&mut grad.regression.w, &head_grad.regression.w);
    axpy(&mut grad.regression.b, &head_grad.regression.b);
    axpy(&mut grad.background, &head_grad.background);
    for (dst, src) in grad.rows.iter_mut().zip(&head_grad.rows) {
        axpy(dst, src);
    }

    // roi layer and pooling
    for (k, b) in rois.iter().enumerate() {
        let dh: Vec<f64> =
            d_r[k].iter().zip(&hs[k]).map(|(g, h)| if *h > 0.0 { g * weight } else { 0.0 }).collect();
        grad.roi_head.accumulate(&xs[k], &dh);
        let mut dx = vec![0.0; xs[k].len()];
        state.roi_head.backward_input(&dh, &mut dx);
        pool_backward(b, cell, &dx, &mut d_map);
    }

    // trunk
    let h = state.backbone.out;
    for ((s, f), d) in stem_map
        .data
        .chunks_exact(STEM_DIM)
        .zip(trunk.map.data.chunks_exact(h))
        .zip(d_map.data.chunks_exact(h))
    {
        let dy: Vec<f64> = d.iter().zip(f).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        grad.backbone.accumulate(s, &dy);
    }

    Ok(StepOutput { loss, gt_embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, DistillConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (DetectorState, DetectorState, TextEmbeddingBank, FeatureMap, ImageTargets) {
        let cfg = DetectorConfig { input_size: 160, cell: 20, trunk_dim: 6, roi_dim: 8, logit_scale: 5.0, ..Default::default() };
        let cfg = DetectorConfig { anchor_shapes: vec![(60.0, 60.0), (80.0, 60.0)], roi_batch: 8, rpn_batch: 8, ..cfg };
        let mut state = DetectorState::new(cfg.clone(), 5, 1);
        state.regression = crate::detector::Linear::random(8, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let teacher = DetectorState::new(cfg, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = TextEmbeddingBank {
            names: vec!["a".into(), "b".into(), "p".into()],
            extra_names: vec![],
            rows: (0..3).map(|_| crate::detector::random_unit(5, &mut rng)).collect(),
        };
        let img = RgbImage::from_fn(160, 160, |x, y| {
            if (30..95).contains(&x) && (40..100).contains(&y) {
                image::Rgb([220, 40, 40])
            } else if (100..150).contains(&x) && (90..150).contains(&y) {
                image::Rgb([40, 70, 220])
            } else {
                image::Rgb([((x * 7 + y * 3) % 120 + 60) as u8, 120, 110])
            }
        });
        let targets = ImageTargets {
            gt: vec![(BBox::new(30.0, 40.0, 95.0, 100.0), "a".into())],
            pseudo: vec![(BBox::new(100.0, 90.0, 150.0, 150.0), "p".into())],
        };
        (state, teacher, bank, stem(&img, 20), targets)
    }

    #[test]
    fn full_step_gradient_matches_finite_differences() {
        let (state, teacher, bank, stem_map, targets) = fixture();
        let dc = DistillConfig::default();
        let mut teacher_bank = bank.clone();
        teacher_bank.names.truncate(2);
        teacher_bank.rows = teacher_bank.rows[..2].iter().map(|r| r.iter().map(|x| x * 1.3 + 0.05).collect()).collect();
        let loss_of = |s: &DetectorState, b: &TextEmbeddingBank| {
            let mut g = Gradients::zeros(s, b.len());
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let tv = TeacherView { state: &teacher, bank: &teacher_bank, config: &dc };
            train_image(s, b, &stem_map, &targets, Some(tv), &mut rng, &mut g, 1.0).unwrap()
        };
        let mut grad = Gradients::zeros(&state, bank.len());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tv = TeacherView { state: &teacher, bank: &teacher_bank, config: &dc };
        let out = train_image(&state, &bank, &stem_map, &targets, Some(tv), &mut rng, &mut grad, 1.0).unwrap();
        assert!(out.loss.reg > 0.0 && out.loss.rpn > 0.0 && out.loss.distill > 0.0);
        assert_eq!(out.gt_embeddings.len(), 1);

        let eps = 1e-6;
        let mut pick = ChaCha8Rng::seed_from_u64(4);
        let n_tensors = state.clone().tensors_mut().len();
        let mut checked = 0;
        for t in 0..n_tensors {
            let len = state.clone().tensors_mut()[t].len();
            for _ in 0..6 {
                let i = pick.gen_range(0..len);
                let analytic = grad.clone().tensors_mut()[t][i];
                let mut plus = state.clone();
                plus.tensors_mut()[t][i] += eps;
                let mut minus = state.clone();
                minus.tensors_mut()[t][i] -= eps;
                let fd = (loss_of(&plus, &bank).loss.total() - loss_of(&minus, &bank).loss.total()) / (2.0 * eps);
                let scale = analytic.abs().max(fd.abs()).max(1e-4);
                assert!((fd - analytic).abs() / scale < 1e-4, "tensor {t} idx {i}: fd {fd} vs {analytic}");
                checked += 1;
            }
        }
        for c in 0..bank.len() {
            for k in 0..5 {
                let mut plus = bank.clone();
                plus.rows[c][k] += eps;
                let mut minus = bank.clone();
                minus.rows[c][k] -= eps;
                let fd = (loss_of(&state, &plus).loss.total() - loss_of(&state, &minus).loss.total()) / (2.0 * eps);
                let a = grad.rows[c][k];
                assert!((fd - a).abs() / a.abs().max(fd.abs()).max(1e-4) < 1e-4, "row {c}/{k}: {fd} vs {a}");
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn bce_matches_direct_formula() {
        for &(x, y) in &[(0.3, true), (-2.0, false), (5.0, false), (-30.0, true)] {
            let p: f64 = 1.0 / (1.0 + (-x as f64).exp());
            let want = if y { -p.ln() } else { -(1.0 - p).ln() };
            assert!((bce(x, y).0 - want).abs() < 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn relabel_merges_and_suppresses() {
        let d = |label: &str, score: f64| DetectionResult {
            image_id: "a".into(),
            label: label.into(),
            score,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        };
        let mut rename = BTreeMap::new();
        rename.insert("polygon".to_string(), Some("hexagon".to_string()));
        rename.insert("round".to_string(), None);
        let out = relabel_detections(vec![d("polygon", 0.9), d("hexagon", 0.8), d("round", 0.7)], &rename, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, "hexagon");
        assert_eq!(out[0].score, 0.9);
    }
}
