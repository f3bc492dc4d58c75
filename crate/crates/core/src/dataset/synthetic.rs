//! Deterministic desk-scale dataset of flat-colored shapes on gray texture.
//!
//! Every class is a (shape, color) recipe. Classes are grouped under parent
//! names so broad-class experiments have a meaningful hierarchy, and the
//! colors are far from the gray background so the stub oracle can recover
//! the recipe of any crop from its pixels.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedBox, DataSplit, DatasetError, DatasetView, ImageRecord, PixelSource};
use crate::evaluation::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Triangle,
    Diamond,
    Hexagon,
    Circle,
    Ellipse,
    Ring,
    Crescent,
}

impl ShapeKind {
    /// Point-in-shape test in the unit box `[0,1]^2`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Triangle => du.abs() <= v / 2.0,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Hexagon => du.abs() <= 0.5 - dv.abs() * 0.5,
            ShapeKind::Circle | ShapeKind::Ellipse => r2 <= 0.25,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
            ShapeKind::Crescent => {
                let (su, sv) = (u - 0.8, v - 0.45);
                r2 <= 0.25 && su * su + sv * sv > 0.16
            }
        }
    }

    /// Aspect ratio (w/h) policy: `None` means free.
    fn fixed_aspect(self) -> Option<f64> {
        match self {
            ShapeKind::Square | ShapeKind::Circle | ShapeKind::Ring => Some(1.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    #[serde(default)]
    pub parent: Option<String>,
}

/// Eight shapes in two parent groups; the last two are the novel classes of the
/// default 6+2 split.
pub fn default_synthetic_classes() -> Vec<ClassRecipe> {
    let c = |name: &str, shape, color, parent: &str| ClassRecipe {
        name: name.into(),
        shape,
        color,
        parent: Some(parent.into()),
    };
    vec![
        c("square", ShapeKind::Square, [220, 40, 40], "polygon"),
        c("triangle", ShapeKind::Triangle, [40, 200, 60], "polygon"),
        c("diamond", ShapeKind::Diamond, [40, 70, 220], "polygon"),
        c("circle", ShapeKind::Circle, [230, 210, 40], "round"),
        c("ellipse", ShapeKind::Ellipse, [210, 50, 200], "round"),
        c("ring", ShapeKind::Ring, [40, 200, 210], "round"),
        c("hexagon", ShapeKind::Hexagon, [240, 140, 30], "polygon"),
        c("crescent", ShapeKind::Crescent, [130, 50, 200], "round"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub num_test_images: usize,
    pub image_size: u32,
    pub boxes_per_image: usize,
    pub min_object_size: u32,
    pub max_object_size: u32,
    pub classes: Vec<ClassRecipe>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            num_test_images: 100,
            image_size: 320,
            boxes_per_image: 2,
            min_object_size: 104,
            max_object_size: 150,
            classes: default_synthetic_classes(),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Parent name -> child class names, in class order.
    pub fn similarity_plan(&self) -> BTreeMap<String, Vec<String>> {
        let mut plan: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in &self.classes {
            if let Some(p) = &c.parent {
                plan.entry(p.clone()).or_default().push(c.name.clone());
            }
        }
        plan
    }

    pub fn palette(&self) -> BTreeMap<String, [u8; 3]> {
        self.classes.iter().map(|c| (c.name.clone(), c.color)).collect()
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: &str| Err(DatasetError::Config(m.to_string()));
        if self.classes.len() < 2 {
            return err("need at least two classes");
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() {
            return err("duplicate class names");
        }
        if self.boxes_per_image == 0 {
            return err("boxes_per_image must be >= 1");
        }
        if self.min_object_size < 8 || self.min_object_size > self.max_object_size {
            return err("object size range must satisfy 8 <= min <= max");
        }
        Ok(())
    }
}

/// Trainval and test views generated from one config.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub trainval: DatasetView,
    pub test: DatasetView,
}

const PLACEMENT_RETRIES: usize = 200;
const LAYOUT_MARGIN: f64 = 4.0;

fn render_image(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, image_id: &str) -> Result<ImageRecord, DatasetError> {
    let size = cfg.image_size;
    let sz = size as f64;
    let mut img = RgbImage::new(size, size);
    let base: f64 = rng.gen_range(110.0..150.0);
    let (fx, fy, phase): (f64, f64, f64) =
        (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05), rng.gen_range(0.0..std::f64::consts::TAU));
    for y in 0..size {
        for x in 0..size {
            let wave = 12.0 * (fx * x as f64 + fy * y as f64 + phase).sin();
            let g = base + wave + rng.gen_range(-8.0..8.0);
            let px = [0, 1, 2].map(|_| (g + rng.gen_range(-3.0..3.0)).clamp(0.0, 255.0) as u8);
            img.put_pixel(x, y, Rgb(px));
        }
    }

    let count = rng.gen_range(1..=cfg.boxes_per_image);
    let mut placed: Vec<BBox> = Vec::new();
    let mut boxes = Vec::new();
    for k in 0..count {
        let recipe = &cfg.classes[rng.gen_range(0..cfg.classes.len())];
        let mut spot = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.gen_range(cfg.min_object_size..=cfg.max_object_size) as f64;
            let h = match (recipe.shape, recipe.shape.fixed_aspect()) {
                (_, Some(a)) => w / a,
                (ShapeKind::Ellipse, None) => w / 1.6,
                _ => rng.gen_range(cfg.min_object_size..=cfg.max_object_size) as f64,
            };
            let (w, h) = if recipe.shape == ShapeKind::Ellipse && rng.gen_bool(0.5) { (h, w) } else { (w, h) };
            if w > sz || h > sz {
                continue;
            }
            let x1 = rng.gen_range(0.0..=(sz - w)).floor();
            let y1 = rng.gen_range(0.0..=(sz - h)).floor();
            let cand = BBox::new(x1, y1, x1 + w.round(), y1 + h.round());
            let grown = BBox::new(cand.x1 - LAYOUT_MARGIN, cand.y1 - LAYOUT_MARGIN, cand.x2 + LAYOUT_MARGIN, cand.y2 + LAYOUT_MARGIN);
            if placed.iter().all(|p| p.intersection_area(&grown) == 0.0) {
                spot = Some(cand);
                break;
            }
        }
        let Some(slot) = spot else {
            if k == 0 {
                return Err(DatasetError::Layout(format!(
                    "could not place an object of size {}..{} in a {size}px image",
                    cfg.min_object_size, cfg.max_object_size
                )));
            }
            continue;
        };
        placed.push(slot);

        let (mut minx, mut miny, mut maxx, mut maxy) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let (x0, y0) = (slot.x1 as u32, slot.y1 as u32);
        let (x1, y1) = ((slot.x2 as u32).min(size), (slot.y2 as u32).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - slot.x1) / slot.width();
                let v = (y as f64 + 0.5 - slot.y1) / slot.height();
                if recipe.shape.contains(u, v) {
                    let px = recipe.color.map(|c| (c as f64 + rng.gen_range(-6.0..6.0)).clamp(0.0, 255.0) as u8);
                    img.put_pixel(x, y, Rgb(px));
                    minx = minx.min(x);
                    miny = miny.min(y);
                    maxx = maxx.max(x);
                    maxy = maxy.max(y);
                }
            }
        }
        if minx == u32::MAX {
            continue;
        }
        boxes.push(AnnotatedBox {
            bbox: BBox::new(minx as f64, miny as f64, maxx as f64 + 1.0, maxy as f64 + 1.0),
            label: recipe.name.clone(),
            difficult: false,
        });
    }
    Ok(ImageRecord {
        image_id: image_id.to_string(),
        width: size,
        height: size,
        boxes,
        pixel_source: PixelSource::Memory(Arc::new(img)),
    })
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders the trainval and test splits. Image `i` draws from its own RNG
/// stream, so output is a pure function of the config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset, DatasetError> {
    config.validate()?;
    let total = config.num_images + config.num_test_images;
    let mut trainval = Vec::with_capacity(config.num_images);
    let mut test = Vec::with_capacity(config.num_test_images);
    for i in 0..total {
        let id = format!("{i:06}");
        let mut rng = image_rng(config.seed, i as u64);
        let rec = render_image(config, &mut rng, &id)?;
        if i < config.num_images {
            trainval.push(rec);
        } else {
            test.push(rec);
        }
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        trainval: DatasetView { records: trainval, task: None, split: DataSplit::Trainval },
        test: DatasetView { records: test, task: None, split: DataSplit::Test },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize, per_image: usize) -> SyntheticConfig {
        SyntheticConfig { num_images: n, num_test_images: 4, boxes_per_image: per_image, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(7, 12, 2)).unwrap();
        let b = generate_synthetic(&small(7, 12, 2)).unwrap();
        let boxes = |d: &SyntheticDataset| d.trainval.records.iter().map(|r| r.boxes.clone()).collect::<Vec<_>>();
        assert_eq!(boxes(&a), boxes(&b));
        assert_eq!(a.trainval, b.trainval);
        let c = generate_synthetic(&small(8, 12, 2)).unwrap();
        assert_ne!(boxes(&a), boxes(&c));
    }

    #[test]
    fn one_box_per_image() {
        let d = generate_synthetic(&small(3, 20, 1)).unwrap();
        assert!(d.trainval.records.iter().all(|r| r.boxes.len() == 1));
    }

    #[test]
    fn boxes_are_tight_and_colored() {
        let d = generate_synthetic(&small(5, 6, 2)).unwrap();
        let cfg = &d.config;
        for r in &d.trainval.records {
            let PixelSource::Memory(img) = &r.pixel_source else { panic!() };
            for b in &r.boxes {
                assert!(b.bbox.is_valid());
                let color = cfg.palette()[&b.label];
                let near = |x: u32, y: u32| {
                    let p = img.get_pixel(x, y).0;
                    (0..3).all(|c| (p[c] as i32 - color[c] as i32).abs() <= 8)
                };
                // the tight box touches a shape pixel on its top and left edges
                let (x1, y1, x2, y2) = (b.bbox.x1 as u32, b.bbox.y1 as u32, b.bbox.x2 as u32, b.bbox.y2 as u32);
                assert!((x1..x2).any(|x| near(x, y1)));
                assert!((y1..y2).any(|y| near(x1, y)));
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small(1, 1, 1);
        c.classes.truncate(1);
        assert!(generate_synthetic(&c).is_err());
        let mut c = small(1, 1, 1);
        c.min_object_size = 400;
        c.max_object_size = 400;
        assert!(matches!(generate_synthetic(&c), Err(DatasetError::Layout(_))));
    }
}
