//! Two-stage detector with a cosine-similarity classification head.
//!
//! The trunk is deliberately small: a fixed per-cell color/edge stem followed
//! by a trainable 1x1 layer. Region features are pooled from an integral image
//! of the trunk map, so proposals of any size cost the same to pool.

mod anchors;
mod checkpoint;
mod distill;
mod features;
mod head;
mod linear;
mod model;

pub use anchors::{anchor_grid, decode, encode, smooth_l1, DELTA_STD};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use distill::{distill_losses, DistillConfig, DistillTarget};
pub use features::{pool, pool_backward, stem, CellRect, FeatureMap, Integral, POOL_BINS, STEM_DIM};
pub use head::{
    classify_cosine, detection_loss, project_roi, HeadGrad, LossComponents, RoiTarget, TargetLabel,
};
pub use linear::Linear;
pub use model::{
    infer, infer_stem, prepare_stem, propose, relabel_detections, score_proposals, train_image, trunk_forward,
    ImageTargets, InputFrame, Proposal, ScoredProposal, StepOutput, TeacherView, TrunkOut,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::BBox;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("projection output has zero norm")]
    ZeroNorm,
    #[error("target label {0:?} is not a bank row")]
    UnknownTarget(String),
    #[error("feature shape mismatch between student and teacher")]
    ShapeMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and sampling knobs of the desk-scale detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Images are resized to a square of this side before the stem.
    pub input_size: u32,
    pub cell: u32,
    pub trunk_dim: usize,
    pub roi_dim: usize,
    pub logit_scale: f64,
    pub anchor_stride: f64,
    pub anchor_shapes: Vec<(f64, f64)>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub pre_nms_top: usize,
    pub proposal_nms: f64,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub roi_fg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub pseudo_to_rpn: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 320,
            cell: 20,
            trunk_dim: 24,
            roi_dim: 48,
            logit_scale: 100.0,
            anchor_stride: 20.0,
            anchor_shapes: vec![
                (110.0, 110.0),
                (140.0, 140.0),
                (80.0, 120.0),
                (120.0, 80.0),
                (110.0, 150.0),
                (150.0, 110.0),
            ],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 32,
            rpn_pos_fraction: 0.5,
            pre_nms_top: 100,
            proposal_nms: 0.7,
            train_proposals: 32,
            test_proposals: 64,
            roi_fg_iou: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            pseudo_to_rpn: false,
        }
    }
}

impl DetectorConfig {
    pub fn pooled_dim(&self) -> usize {
        POOL_BINS * self.trunk_dim
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let s = self.input_size as f64;
        anchor_grid(s, s, self.anchor_stride, &self.anchor_shapes)
    }
}

/// All trainable detector parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub config: DetectorConfig,
    pub backbone: Linear,
    pub rpn: Linear,
    pub roi_head: Linear,
    pub projection: Linear,
    pub regression: Linear,
    pub background_embedding: Vec<f64>,
    pub logit_scale: f64,
}

impl DetectorState {
    /// Seeded initialization; `embed_dim` must equal the bank dimension.
    pub fn new(config: DetectorConfig, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = config.pooled_dim();
        let backbone = Linear::random(STEM_DIM, config.trunk_dim, 1.0, &mut rng);
        let rpn = Linear::random(pooled, 1, 0.1, &mut rng);
        let roi_head = Linear::random(pooled, config.roi_dim, 1.0, &mut rng);
        let projection = Linear::random(config.roi_dim, embed_dim, 1.0, &mut rng);
        let regression = Linear::zeros(config.roi_dim, 4);
        let background_embedding = random_unit(embed_dim, &mut rng);
        let logit_scale = config.logit_scale;
        Self { config, backbone, rpn, roi_head, projection, regression, background_embedding, logit_scale }
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.out
    }

    /// Flat views of every parameter tensor in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.backbone.w,
            &mut self.backbone.b,
            &mut self.rpn.w,
            &mut self.rpn.b,
            &mut self.roi_head.w,
            &mut self.roi_head.b,
            &mut self.projection.w,
            &mut self.projection.b,
            &mut self.regression.w,
            &mut self.regression.b,
            &mut self.background_embedding,
        ]
    }

    /// Restores the unit-norm invariant of the background row.
    pub fn renormalize_background(&mut self) {
        normalize_in_place(&mut self.background_embedding);
    }

    pub fn is_finite(&self) -> bool {
        let mut s = self.clone();
        s.tensors_mut().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers shaped like [`DetectorState`] plus bank rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Linear,
    pub rpn: Linear,
    pub roi_head: Linear,
    pub projection: Linear,
    pub regression: Linear,
    pub background: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(state: &DetectorState, bank_rows: usize) -> Self {
        Self {
            backbone: state.backbone.zeros_like(),
            rpn: state.rpn.zeros_like(),
            roi_head: state.roi_head.zeros_like(),
            projection: state.projection.zeros_like(),
            regression: state.regression.zeros_like(),
            background: vec![0.0; state.embed_dim()],
            rows: vec![vec![0.0; state.embed_dim()]; bank_rows],
        }
    }

    /// Same order as [`DetectorState::tensors_mut`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.backbone.w,
            &mut self.backbone.b,
            &mut self.rpn.w,
            &mut self.rpn.b,
            &mut self.roi_head.w,
            &mut self.roi_head.b,
            &mut self.projection.w,
            &mut self.projection.b,
            &mut self.regression.w,
            &mut self.regression.b,
            &mut self.background,
        ]
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
        for r in &mut self.rows {
            r.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn norm(&mut self) -> f64 {
        let mut s: f64 = self.tensors_mut().iter().flat_map(|t| t.iter()).map(|v| v * v).sum();
        s += self.rows.iter().flatten().map(|v| v * v).sum::<f64>();
        s.sqrt()
    }
}

pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = crate::oracle::l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn random_unit(dim: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut v) > 1e-6 {
            return v;
        }
    }
}
