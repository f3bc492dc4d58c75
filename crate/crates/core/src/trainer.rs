//! Two-task training protocol.
//!
//! Task 1 trains on base annotations with an embedding bank that also holds
//! the broad names, mining pseudo boxes as it goes. Task 2 starts from the task 1
//! model: a warm-up phase learns novel boxes against broad rows while measuring
//! which broad row each novel class resembles, then the mapped rows are swapped
//! for the novel names. Distillation from the frozen task 1 model and
//! a small rehearsal set counter forgetting.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::imageops;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedBox, DatasetView, ImageRecord, PixelSource};
use crate::detector::{
    prepare_stem, score_proposals, stem, train_image, Checkpoint, DetectorConfig, DetectorError, DetectorState,
    DistillConfig, FeatureMap, Gradients, ImageTargets, InputFrame, LossComponents, TeacherView,
};
use crate::evaluation::BBox;
use crate::miner::{identify, select_background_proposals, BackgroundCandidate, MinerConfig, MinerError, PseudoStore};
use crate::oracle::{cosine, EmbeddingOracle, EmbeddingVector, OracleConfig, OracleError};
use crate::registry::IncrementalSchedule;
use crate::text_space::{
    accumulate_similarity, build_text_bank, finalize_mapping, optimal_assignment, swap_embeddings, CategoryMapping,
    MappingAccumulator, PromptTemplate, TextEmbeddingBank, TextSpaceError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("task {task}: training view is empty")]
    EmptyView { task: u8 },
    #[error("task {task}: loss diverged at iteration {iter} ({components:?})")]
    Diverged { task: u8, iter: u64, components: LossComponents },
    #[error("mapping still under-observed at iteration {iter}: {source}")]
    UnderObserved { iter: u64, source: TextSpaceError },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("image {id}: {reason}")]
    Image { id: String, reason: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    TextSpace(#[from] TextSpaceError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// The three independent method switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Classify against frozen text embeddings instead of free learned rows.
    pub text: bool,
    /// Broad rows in task 1 and the category mapping in task 2.
    pub broad: bool,
    /// Unknown-object mining in task 1.
    pub image: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles { text: true, broad: true, image: true };
    pub const NONE: Toggles = Toggles { text: false, broad: false, image: false };

    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.text, "text"), (self.broad, "broad"), (self.image, "image")]
            .iter()
            .filter(|t| t.0)
            .map(|t| t.1)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }

    /// Task 1 carries broad rows whenever the mapping or the miner needs them.
    pub fn broad_rows_in_task1(&self) -> bool {
        self.broad || self.image
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

/// Parses the form produced by [`Toggles::label`]; `,` also separates and `full` enables everything.
impl std::str::FromStr for Toggles {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut t = Toggles::NONE;
        match s.trim() {
            "none" => return Ok(t),
            "full" => return Ok(Toggles::FULL),
            _ => {}
        }
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "text" => t.text = true,
                "broad" => t.broad = true,
                "image" => t.image = true,
                other => return Err(format!("unknown toggle {other:?} (expected text, broad, image, full or none)")),
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub iters_per_task: u64,
    pub swap_after_fraction: f64,
    /// Phase A may stretch to this multiple of its nominal length while the
    /// mapping lacks observations.
    pub max_phase_a_extension: f64,
    pub min_mapping_observations: u64,
    pub distill: DistillConfig,
    pub rehearsal_per_class: usize,
    /// Share of each task 2 batch drawn from the rehearsal buffer.
    pub rehearsal_fraction: f64,
    pub grad_clip: f64,
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr_initial: 0.02,
            lr_final: 0.0002,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 100,
            iters_per_task: 1000,
            swap_after_fraction: 0.2,
            max_phase_a_extension: 2.0,
            min_mapping_observations: 20,
            distill: DistillConfig::default(),
            rehearsal_per_class: 10,
            rehearsal_fraction: 0.25,
            grad_clip: 10.0,
            horizontal_flip: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_final <= self.lr_initial) || self.lr_final < 0.0 {
            return bad(format!("need 0 <= lr_final <= lr_initial, got {} / {}", self.lr_final, self.lr_initial));
        }
        if !(self.swap_after_fraction > 0.0 && self.swap_after_fraction < 1.0) {
            return bad(format!("swap_after_fraction must lie in (0,1), got {}", self.swap_after_fraction));
        }
        if !(0.0..1.0).contains(&self.rehearsal_fraction) {
            return bad(format!("rehearsal_fraction must lie in [0,1), got {}", self.rehearsal_fraction));
        }
        if !self.distill.weight.is_finite() || self.distill.weight < 0.0 {
            return bad(format!("distillation weight must be finite and >= 0, got {}", self.distill.weight));
        }
        Ok(())
    }

    /// Iteration at which task 2 swaps broad rows for novel rows.
    pub fn swap_iteration(&self) -> u64 {
        (self.swap_after_fraction * self.iters_per_task as f64).round() as u64
    }
}

/// Linear warm-up to `lr_initial`, then cosine decay reaching `lr_final` at
/// `iters_per_task`.
pub fn lr_schedule(iter: u64, config: &TrainConfig) -> f64 {
    let total = config.iters_per_task;
    let warm = config.warmup_iters.min(total);
    if iter < warm {
        return config.lr_initial * iter as f64 / warm as f64;
    }
    if total <= warm {
        return config.lr_initial;
    }
    let t = (iter.min(total) - warm) as f64 / (total - warm) as f64;
    config.lr_final + 0.5 * (config.lr_initial - config.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Stems of an image and of its mirror, in the detector input frame.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image_id: String,
    pub frame: InputFrame,
    pub stem: FeatureMap,
    pub stem_flipped: FeatureMap,
    pub pixel_source: PixelSource,
}

/// Image stems keyed by id. Stems do not depend on trainable parameters, so
/// one cache serves every run over the same images and input size.
#[derive(Debug, Clone, Default)]
pub struct StemCache {
    map: BTreeMap<String, Arc<PreparedImage>>,
}

impl StemCache {
    pub fn build(records: &[ImageRecord], config: &DetectorConfig) -> Result<Self, TrainError> {
        let probe = DetectorState::new(config.clone(), 1, 0);
        let mut map = BTreeMap::new();
        for r in records {
            if map.contains_key(&r.image_id) {
                continue;
            }
            let img = r.pixel_source.load().map_err(|e| TrainError::Image { id: r.image_id.clone(), reason: e.to_string() })?;
            let (s, frame) = prepare_stem(&img, &probe);
            let flipped = imageops::flip_horizontal(&imageops::resize(
                &*img,
                config.input_size,
                config.input_size,
                imageops::FilterType::Triangle,
            ));
            let sf = stem(&flipped, config.cell);
            map.insert(
                r.image_id.clone(),
                Arc::new(PreparedImage {
                    image_id: r.image_id.clone(),
                    frame,
                    stem: s,
                    stem_flipped: sf,
                    pixel_source: r.pixel_source.clone(),
                }),
            );
        }
        Ok(Self { map })
    }

    pub fn get(&self, id: &str) -> Result<&Arc<PreparedImage>, TrainError> {
        self.map.get(id).ok_or_else(|| TrainError::Image { id: id.to_string(), reason: "not in stem cache".into() })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Up to `rehearsal_per_class` task 1 images per base class, with their task 1
/// annotations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    pub per_class: BTreeMap<String, Vec<String>>,
    pub annotations: BTreeMap<String, Vec<AnnotatedBox>>,
}

impl RehearsalBuffer {
    pub fn sample(view: &DatasetView, classes: &[String], per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_6865_6172_7365);
        let mut out = Self::default();
        for c in classes {
            let mut ids: Vec<&ImageRecord> = view.records.iter().filter(|r| r.boxes.iter().any(|b| &b.label == c)).collect();
            ids.shuffle(&mut rng);
            let chosen: Vec<String> = ids.iter().take(per_class).map(|r| r.image_id.clone()).collect();
            for r in ids.iter().take(per_class) {
                out.annotations.entry(r.image_id.clone()).or_insert_with(|| r.boxes.clone());
            }
            out.per_class.insert(c.clone(), chosen);
        }
        out
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.annotations.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: u8,
    pub iter: u64,
    pub phase: String,
    pub lr: f64,
    pub cls: f64,
    pub reg: f64,
    pub rpn: f64,
    pub distill: f64,
    pub total: f64,
}

/// Everything a training stage reads besides the data.
pub struct StageContext<'a> {
    pub schedule: &'a IncrementalSchedule,
    pub oracle: &'a dyn EmbeddingOracle,
    pub oracle_config: &'a OracleConfig,
    pub template: &'a PromptTemplate,
    pub toggles: Toggles,
    pub train: &'a TrainConfig,
    pub miner: &'a MinerConfig,
    pub detector: &'a DetectorConfig,
    pub extra_names: &'a [String],
    pub stems: &'a StemCache,
}

pub struct Task1Output {
    pub checkpoint: Checkpoint,
    pub store: PseudoStore,
    pub rehearsal: RehearsalBuffer,
    pub metrics: Vec<MetricRecord>,
}

pub struct Task2Output {
    pub checkpoint: Checkpoint,
    pub mapping: Option<CategoryMapping>,
    pub swap_iteration: Option<u64>,
    pub metrics: Vec<MetricRecord>,
}

/// Cycles through indices in a fresh seeded order every epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { order: (0..n).collect(), pos: n, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// SGD with momentum over detector parameters and, optionally, bank rows.
struct Optimizer {
    velocity: Gradients,
}

impl Optimizer {
    fn new(state: &DetectorState, rows: usize) -> Self {
        Self { velocity: Gradients::zeros(state, rows) }
    }

    fn step(
        &mut self,
        state: &mut DetectorState,
        bank: &mut TextEmbeddingBank,
        grad: &mut Gradients,
        lr: f64,
        cfg: &TrainConfig,
        learn_rows: bool,
    ) {
        if !learn_rows {
            grad.rows.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        }
        let norm = grad.norm();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grad.scale(cfg.grad_clip / norm);
        }
        let mut params = state.tensors_mut();
        let n = params.len();
        let grads = grad.tensors_mut();
        let vels = self.velocity.tensors_mut();
        for (k, ((p, g), v)) in params.iter_mut().zip(grads).zip(vels).enumerate() {
            // no decay on the background direction
            let wd = if k + 1 == n { 0.0 } else { cfg.weight_decay };
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = cfg.momentum * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        state.renormalize_background();
        if learn_rows {
            for ((row, g), v) in bank.rows.iter_mut().zip(&grad.rows).zip(&mut self.velocity.rows) {
                for ((pi, gi), vi) in row.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
            bank.renormalize();
        }
    }
}

fn flip_box(b: &BBox, size: f64) -> BBox {
    BBox::new(size - b.x2, b.y1, size - b.x1, b.y2)
}

fn learned_rows(names: &[String], dim: usize, seed: u64, salt: &str) -> Vec<Vec<f64>> {
    names
        .iter()
        .map(|n| {
            let s = crate::oracle::seed_of(&[&seed.to_le_bytes(), salt.as_bytes(), n.as_bytes()]);
            crate::detector::random_unit(dim, &mut ChaCha8Rng::seed_from_u64(s))
        })
        .collect()
}

/// Task 1 bank: base rows, then broad rows when enabled, then extras.
pub fn task1_bank(ctx: &StageContext<'_>) -> Result<TextEmbeddingBank, TrainError> {
    let reg = &ctx.schedule.registry;
    let mut names = reg.base_names.clone();
    if ctx.toggles.broad_rows_in_task1() {
        names.extend(reg.broad_names.iter().cloned());
    }
    if ctx.toggles.text {
        Ok(build_text_bank(&names, ctx.template, ctx.oracle, ctx.extra_names)?)
    } else {
        let rows = learned_rows(&names, ctx.oracle.dim(), ctx.train.seed, "row");
        Ok(TextEmbeddingBank { names, extra_names: vec![], rows })
    }
}

/// Mapping from oracle text similarity alone: each novel name goes to the
/// broad name its prompt embedding is closest to, under a one-to-one constraint.
pub fn text_prior_mapping(
    novel: &[String],
    broad: &[String],
    template: &PromptTemplate,
    oracle: &dyn EmbeddingOracle,
) -> Result<CategoryMapping, TrainError> {
    if novel.is_empty() || broad.len() < novel.len() {
        return Ok(CategoryMapping::default());
    }
    let emb = |v: &[String]| -> Result<Vec<EmbeddingVector>, OracleError> {
        oracle.embed_texts(&v.iter().map(|n| template.apply(n)).collect::<Vec<_>>())
    };
    let (n, b) = (emb(novel)?, emb(broad)?);
    let w: Vec<Vec<f64>> = n.iter().map(|x| b.iter().map(|y| cosine(&x.values, &y.values)).collect()).collect();
    let cols = optimal_assignment(&w);
    Ok(CategoryMapping { pairs: novel.iter().zip(cols).map(|(x, c)| (x.clone(), broad[c].clone())).collect() })
}

struct Sample<'a> {
    prepared: &'a PreparedImage,
    gt: Vec<(BBox, String)>,
    pseudo: Vec<(BBox, String)>,
    flip: bool,
}

impl Sample<'_> {
    fn targets(&self, size: f64) -> (ImageTargets, &FeatureMap) {
        let map = |v: &[(BBox, String)]| -> Vec<(BBox, String)> {
            v.iter()
                .map(|(b, l)| {
                    let b = self.prepared.frame.to_input(b);
                    (if self.flip { flip_box(&b, size) } else { b }, l.clone())
                })
                .collect()
        };
        let stem = if self.flip { &self.prepared.stem_flipped } else { &self.prepared.stem };
        (ImageTargets { gt: map(&self.gt), pseudo: map(&self.pseudo) }, stem)
    }
}

fn gt_of(boxes: &[AnnotatedBox]) -> Vec<(BBox, String)> {
    boxes.iter().map(|b| (b.bbox, b.label.clone())).collect()
}

/// Trains `state` on task 1; returns the checkpoint, pseudo store and rehearsal set.
pub fn run_task_1(
    ctx: &StageContext<'_>,
    train_view: &DatasetView,
    initial_store: Option<PseudoStore>,
) -> Result<Task1Output, TrainError> {
    ctx.train.validate()?;
    ctx.miner.validate()?;
    let task = ctx.schedule.task1();
    let view = crate::dataset::filter_for_task(train_view, task);
    if view.records.is_empty() {
        return Err(TrainError::EmptyView { task: 1 });
    }
    let cfg = ctx.train;
    let mut bank = task1_bank(ctx)?;
    let mut state = DetectorState::new(ctx.detector.clone(), bank.dim(), cfg.seed);
    let mut opt = Optimizer::new(&state, bank.len());
    let mut store = initial_store.unwrap_or_else(|| PseudoStore::new(ctx.miner.nms_iou));
    let mining = ctx.toggles.image && ctx.miner.enabled;
    let broad = &ctx.schedule.registry.broad_names;
    let size = ctx.detector.input_size as f64;
    let mut sampler = EpochSampler::new(view.records.len(), cfg.seed ^ 0x5431);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7431);
    let mut metrics = Vec::with_capacity(cfg.iters_per_task as usize);

    for iter in 0..cfg.iters_per_task {
        let lr = lr_schedule(iter, cfg);
        let mut grad = Gradients::zeros(&state, bank.len());
        let mut loss = LossComponents::default();
        let weight = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let rec = &view.records[sampler.next()];
            let prepared = ctx.stems.get(&rec.image_id)?;
            if mining && iter >= ctx.miner.start_iter && !store.contains(&rec.image_id) {
                mine_image(ctx, &state, &bank, prepared, &task.label_space, broad, &mut store, iter)?;
            }
            let pseudo_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ iter;
            let pseudo = store.sample_for_training(&rec.image_id, pseudo_seed).into_iter().map(|p| (p.bbox, p.label)).collect();
            let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
            let sample = Sample { prepared, gt: gt_of(&rec.boxes), pseudo, flip };
            let (targets, stem_map) = sample.targets(size);
            let out = train_image(&state, &bank, stem_map, &targets, None, &mut rng, &mut grad, weight)?;
            loss.add(&out.loss.scaled(weight));
        }
        if !loss.total().is_finite() {
            return Err(TrainError::Diverged { task: 1, iter, components: loss });
        }
        opt.step(&mut state, &mut bank, &mut grad, lr, cfg, !ctx.toggles.text);
        metrics.push(record(1, iter, "base", lr, &loss));
    }

    let rehearsal =
        RehearsalBuffer::sample(&view, &ctx.schedule.registry.base_names, cfg.rehearsal_per_class, cfg.seed);
    let mut checkpoint = Checkpoint::new(state, bank, None);
    checkpoint.metadata.insert("task".into(), "1".into());
    checkpoint.metadata.insert("toggles".into(), ctx.toggles.label());
    checkpoint.metadata.insert("seed".into(), cfg.seed.to_string());
    checkpoint.metadata.insert("iterations".into(), cfg.iters_per_task.to_string());
    Ok(Task1Output { checkpoint, store, rehearsal, metrics })
}

#[allow(clippy::too_many_arguments)]
fn mine_image(
    ctx: &StageContext<'_>,
    state: &DetectorState,
    bank: &TextEmbeddingBank,
    prepared: &PreparedImage,
    label_space: &[String],
    broad: &[String],
    store: &mut PseudoStore,
    iter: u64,
) -> Result<(), TrainError> {
    let scored = score_proposals(state, bank, &prepared.stem)?;
    let candidates: Vec<BackgroundCandidate> = scored
        .iter()
        .map(|s| BackgroundCandidate {
            bbox: prepared.frame.to_original(&s.proposal.bbox),
            background_probability: s.background_probability(),
        })
        .collect();
    let picked = select_background_proposals(&candidates, ctx.miner.top_k_background, ctx.miner.min_side);
    if picked.is_empty() {
        return Ok(());
    }
    let image = prepared
        .pixel_source
        .load()
        .map_err(|e| TrainError::Image { id: prepared.image_id.clone(), reason: e.to_string() })?;
    let boxes: Vec<BBox> = picked.iter().map(|&i| candidates[i].bbox).collect();
    let found =
        identify(&boxes, &image, broad, label_space, ctx.oracle, ctx.oracle_config, ctx.template, ctx.miner, iter)?;
    store.commit(&prepared.image_id, found);
    Ok(())
}

fn record(task: u8, iter: u64, phase: &str, lr: f64, l: &LossComponents) -> MetricRecord {
    MetricRecord {
        task,
        iter,
        phase: phase.into(),
        lr,
        cls: l.cls,
        reg: l.reg,
        rpn: l.rpn,
        distill: l.distill,
        total: l.total(),
    }
}

/// Task 2 bank before any swap, plus whether a swap is pending.
fn task2_bank(ctx: &StageContext<'_>, m1: &TextEmbeddingBank) -> Result<(TextEmbeddingBank, bool), TrainError> {
    let reg = &ctx.schedule.registry;
    if ctx.toggles.broad {
        return Ok((m1.clone(), true));
    }
    // drop broad rows kept only for mining and append novel rows
    let keep: Vec<usize> = (0..m1.names.len()).filter(|&i| !reg.is_broad(&m1.names[i])).collect();
    let mut names: Vec<String> = keep.iter().map(|&i| m1.names[i].clone()).collect();
    let mut rows: Vec<Vec<f64>> = keep.iter().map(|&i| m1.rows[i].clone()).collect();
    let novel_rows = if ctx.toggles.text {
        let prompts: Vec<String> = reg.novel_names.iter().map(|n| ctx.template.apply(n)).collect();
        ctx.oracle.embed_texts(&prompts)?.into_iter().map(|e| e.values).collect()
    } else {
        learned_rows(&reg.novel_names, m1.dim(), ctx.train.seed, "novel")
    };
    names.extend(reg.novel_names.iter().cloned());
    rows.extend(novel_rows);
    let extra_rows: Vec<Vec<f64>> = (m1.names.len()..m1.len()).map(|i| m1.rows[i].clone()).collect();
    rows.extend(extra_rows);
    Ok((TextEmbeddingBank { names, extra_names: m1.extra_names.clone(), rows }, false))
}

/// Trains task 2 from the task 1 checkpoint.
pub fn run_task_2(
    ctx: &StageContext<'_>,
    m1: &Checkpoint,
    train_view: &DatasetView,
    rehearsal: &RehearsalBuffer,
) -> Result<Task2Output, TrainError> {
    ctx.train.validate()?;
    let cfg = ctx.train;
    let reg = &ctx.schedule.registry;
    let task = ctx.schedule.task2();
    let view = crate::dataset::filter_for_task(train_view, task);
    if view.records.is_empty() {
        return Err(TrainError::EmptyView { task: 2 });
    }
    let teacher = m1.state.clone();
    let mut state = m1.state.clone();
    let (mut bank, mut swap_pending) = task2_bank(ctx, &m1.bank)?;
    let mut opt = Optimizer::new(&state, bank.len());
    let size = ctx.detector.input_size as f64;
    let mut acc = MappingAccumulator::new(&reg.novel_names, &reg.broad_names);
    let prior = if swap_pending {
        text_prior_mapping(&reg.novel_names, &reg.broad_names, ctx.template, ctx.oracle)?
    } else {
        CategoryMapping::default()
    };
    let swap_at = cfg.swap_iteration();
    let give_up_at = ((swap_at as f64) * cfg.max_phase_a_extension.max(1.0)).ceil() as u64;
    let mut mapping = None;
    let mut swap_iteration = None;

    let rehearsal_ids = rehearsal.image_ids();
    let n_rehearsal = if rehearsal_ids.is_empty() {
        0
    } else {
        ((cfg.batch_size as f64 * cfg.rehearsal_fraction).round() as usize).min(cfg.batch_size - 1)
    };
    let mut new_sampler = EpochSampler::new(view.records.len(), cfg.seed ^ 0x5432);
    let mut old_sampler = EpochSampler::new(rehearsal_ids.len(), cfg.seed ^ 0x5433);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7432);
    let mut metrics = Vec::with_capacity(cfg.iters_per_task as usize);
    // head outputs are distilled over the old label set
    let teacher_bank = {
        let keep: Vec<usize> = (0..m1.bank.names.len()).filter(|&i| reg.is_base(&m1.bank.names[i])).collect();
        TextEmbeddingBank {
            names: keep.iter().map(|&i| m1.bank.names[i].clone()).collect(),
            extra_names: vec![],
            rows: keep.iter().map(|&i| m1.bank.rows[i].clone()).collect(),
        }
    };
    let teacher_view = TeacherView { state: &teacher, bank: &teacher_bank, config: &cfg.distill };

    for iter in 0..cfg.iters_per_task {
        if swap_pending && iter >= swap_at {
            match finalize_mapping(&acc, cfg.min_mapping_observations) {
                Ok(m) => {
                    bank = if ctx.toggles.text {
                        swap_embeddings(&bank, &m, ctx.template, ctx.oracle)?
                    } else {
                        bank.renamed(&m)?
                    };
                    log::info!("task 2: swapped broad rows at iteration {iter}: {:?}", m.pairs);
                    mapping = Some(m);
                    swap_iteration = Some(iter);
                    swap_pending = false;
                }
                Err(e @ TextSpaceError::UnderObserved { .. }) => {
                    if iter >= give_up_at {
                        return Err(TrainError::UnderObserved { iter, source: e });
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        // novel boxes train against the broad row they currently map to
        let provisional = if swap_pending {
            if acc.counts.iter().all(|&c| c > 0) {
                let cols = optimal_assignment(&acc.mean_matrix());
                reg.novel_names.iter().zip(cols).map(|(n, c)| (n.clone(), reg.broad_names[c].clone())).collect()
            } else {
                prior.pairs.iter().cloned().collect::<BTreeMap<_, _>>()
            }
        } else {
            BTreeMap::new()
        };

        let lr = lr_schedule(iter, cfg);
        let mut grad = Gradients::zeros(&state, bank.len());
        let mut loss = LossComponents::default();
        let weight = 1.0 / cfg.batch_size as f64;
        for slot in 0..cfg.batch_size {
            // `observed` holds the true novel name of each box while the mapping is measured
            let (id, boxes, observed) = if slot < n_rehearsal {
                let id = &rehearsal_ids[old_sampler.next()];
                let gt = gt_of(&rehearsal.annotations[id]);
                let n = gt.len();
                (id.clone(), gt, vec![None; n])
            } else {
                let rec = &view.records[new_sampler.next()];
                let gt = rec
                    .boxes
                    .iter()
                    .map(|b| (b.bbox, provisional.get(&b.label).cloned().unwrap_or_else(|| b.label.clone())))
                    .collect();
                let observed = rec.boxes.iter().map(|b| swap_pending.then(|| b.label.clone())).collect();
                (rec.image_id.clone(), gt, observed)
            };
            let prepared = ctx.stems.get(&id)?;
            let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
            let sample = Sample { prepared, gt: boxes, pseudo: vec![], flip };
            let (targets, stem_map) = sample.targets(size);
            let out = train_image(&state, &bank, stem_map, &targets, Some(teacher_view), &mut rng, &mut grad, weight)?;
            for ((_, v), novel) in out.gt_embeddings.iter().zip(&observed) {
                if let Some(name) = novel {
                    let e = EmbeddingVector { values: v.clone(), unit_norm: true };
                    accumulate_similarity(&mut acc, name, &e, &bank)?;
                }
            }
            loss.add(&out.loss.scaled(weight));
        }
        if swap_pending {
            acc.end_iteration();
        }
        if !loss.total().is_finite() {
            return Err(TrainError::Diverged { task: 2, iter, components: loss });
        }
        opt.step(&mut state, &mut bank, &mut grad, lr, cfg, !ctx.toggles.text);
        metrics.push(record(2, iter, if swap_pending { "warmup" } else { "novel" }, lr, &loss));
    }

    let mut checkpoint = Checkpoint::new(state, bank, mapping.clone());
    checkpoint.metadata.insert("task".into(), "2".into());
    checkpoint.metadata.insert("toggles".into(), ctx.toggles.label());
    checkpoint.metadata.insert("seed".into(), cfg.seed.to_string());
    checkpoint.metadata.insert("iterations".into(), cfg.iters_per_task.to_string());
    if let Some(i) = swap_iteration {
        checkpoint.metadata.insert("swap_iteration".into(), i.to_string());
    }
    Ok(Task2Output { checkpoint, mapping, swap_iteration, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert!((lr_schedule(100, &c) - 0.02).abs() < 1e-15);
        assert!((lr_schedule(1000, &c) - 0.0002).abs() < 1e-15);
        assert!((lr_schedule(50, &c) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn lr_decreases_after_warmup() {
        let c = TrainConfig::default();
        let v: Vec<f64> = (100..=1000).map(|i| lr_schedule(i, &c)).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn swap_boundary_arithmetic() {
        let c = TrainConfig { iters_per_task: 1000, swap_after_fraction: 0.2, ..Default::default() };
        assert_eq!(c.swap_iteration(), 200);
    }

    #[test]
    fn toggle_labels() {
        assert_eq!(Toggles::FULL.label(), "text+broad+image");
        assert_eq!(Toggles::NONE.label(), "none");
        assert!(Toggles { text: false, broad: false, image: true }.broad_rows_in_task1());
        for t in crate::runner::ABLATION_ROWS.into_iter().chain([Toggles::NONE]) {
            assert_eq!(t.label().parse::<Toggles>().unwrap(), t);
        }
        assert_eq!("image, text".parse::<Toggles>().unwrap(), Toggles { text: true, broad: false, image: true });
        assert!("colour".parse::<Toggles>().is_err());
    }

    #[test]
    fn epoch_sampler_visits_everything_once_per_epoch() {
        let mut s = EpochSampler::new(5, 1);
        let mut seen: Vec<usize> = (0..5).map(|_| s.next()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
