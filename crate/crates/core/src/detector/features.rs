//! Fixed cell stem, integral-image region pooling and its adjoint.

use image::RgbImage;

use crate::evaluation::BBox;

/// Per-cell descriptor length: 27 color-bin shares, mean RGB, two edge energies.
pub const STEM_DIM: usize = 32;

/// Row-major `gh x gw x ch` grid of cell features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub gw: usize,
    pub gh: usize,
    pub ch: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(gw: usize, gh: usize, ch: usize) -> Self {
        Self { gw, gh, ch, data: vec![0.0; gw * gh * ch] }
    }

    pub fn cells(&self) -> usize {
        self.gw * self.gh
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.gw + x) * self.ch;
        &self.data[o..o + self.ch]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.gw + x) * self.ch;
        &mut self.data[o..o + self.ch]
    }
}

/// Computes the fixed stem descriptor for every `cell x cell` pixel block.
pub fn stem(image: &RgbImage, cell: u32) -> FeatureMap {
    let (w, h) = image.dimensions();
    let gw = w.div_ceil(cell) as usize;
    let gh = h.div_ceil(cell) as usize;
    let mut map = FeatureMap::zeros(gw, gh, STEM_DIM);
    let gray = |x: u32, y: u32| {
        let p = image.get_pixel(x, y).0;
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    for gy in 0..gh {
        for gx in 0..gw {
            let (x0, y0) = (gx as u32 * cell, gy as u32 * cell);
            let (x1, y1) = ((x0 + cell).min(w), (y0 + cell).min(h));
            let out = map.cell_mut(gx, gy);
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let (mut ex, mut ey) = (0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.get_pixel(x, y).0;
                    let bin = (p[0] as usize * 3 / 256) * 9 + (p[1] as usize * 3 / 256) * 3 + p[2] as usize * 3 / 256;
                    out[bin] += 1.0;
                    for c in 0..3 {
                        out[27 + c] += p[c] as f64 / 255.0;
                    }
                    let g = gray(x, y);
                    if x + 1 < w {
                        ex += (gray(x + 1, y) - g).abs();
                    }
                    if y + 1 < h {
                        ey += (gray(x, y + 1) - g).abs();
                    }
                }
            }
            for v in out[..30].iter_mut() {
                *v /= n;
            }
            out[30] = 4.0 * ex / (255.0 * n);
            out[31] = 4.0 * ey / (255.0 * n);
        }
    }
    map
}

/// Summed-area table over a [`FeatureMap`]; `(gh+1) x (gw+1) x ch`.
#[derive(Debug, Clone)]
pub struct Integral {
    gw: usize,
    gh: usize,
    ch: usize,
    table: Vec<f64>,
}

impl Integral {
    pub fn new(map: &FeatureMap) -> Self {
        let (gw, gh, ch) = (map.gw, map.gh, map.ch);
        let stride = (gw + 1) * ch;
        let mut table = vec![0.0; (gh + 1) * stride];
        for y in 0..gh {
            let mut row = vec![0.0; ch];
            for x in 0..gw {
                for (r, v) in row.iter_mut().zip(map.cell(x, y)) {
                    *r += v;
                }
                let o = (y + 1) * stride + (x + 1) * ch;
                let above = y * stride + (x + 1) * ch;
                for c in 0..ch {
                    table[o + c] = table[above + c] + row[c];
                }
            }
        }
        Self { gw, gh, ch, table }
    }

    /// Integral of the piecewise-constant map over `[0,x] x [0,y]` (cell units),
    /// added with weight `sign` into `out`. Exact: bilinear inside a cell.
    fn corner(&self, x: f64, y: f64, sign: f64, out: &mut [f64]) {
        let x = x.clamp(0.0, self.gw as f64);
        let y = y.clamp(0.0, self.gh as f64);
        let x0 = (x.floor() as usize).min(self.gw - 1);
        let y0 = (y.floor() as usize).min(self.gh - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let stride = (self.gw + 1) * self.ch;
        let s00 = y0 * stride + x0 * self.ch;
        let s01 = s00 + self.ch;
        let s10 = s00 + stride;
        let s11 = s10 + self.ch;
        let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        let t = &self.table;
        for c in 0..self.ch {
            out[c] += sign * (w00 * t[s00 + c] + w01 * t[s01 + c] + w10 * t[s10 + c] + w11 * t[s11 + c]);
        }
    }

    /// Mean of the map over a rectangle in cell units, written into `out`.
    pub fn mean(&self, r: &CellRect, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let area = r.area();
        if area <= 0.0 {
            return;
        }
        self.corner(r.x2, r.y2, 1.0, out);
        self.corner(r.x1, r.y2, -1.0, out);
        self.corner(r.x2, r.y1, -1.0, out);
        self.corner(r.x1, r.y1, 1.0, out);
        out.iter_mut().for_each(|v| *v /= area);
    }
}

/// Rectangle in cell units, already clamped to the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CellRect {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Adds `grad / area * overlap(cell)` to every cell the rectangle covers:
    /// the adjoint of [`Integral::mean`].
    pub fn scatter(&self, grad: &[f64], into: &mut FeatureMap) {
        let area = self.area();
        if area <= 0.0 {
            return;
        }
        let xs = self.x1.floor() as usize;
        let ys = self.y1.floor() as usize;
        let xe = (self.x2.ceil() as usize).min(into.gw);
        let ye = (self.y2.ceil() as usize).min(into.gh);
        for y in ys..ye {
            let oy = (self.y2.min(y as f64 + 1.0) - self.y1.max(y as f64)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for x in xs..xe {
                let ox = (self.x2.min(x as f64 + 1.0) - self.x1.max(x as f64)).max(0.0);
                if ox == 0.0 {
                    continue;
                }
                let w = ox * oy / area;
                for (d, g) in into.cell_mut(x, y).iter_mut().zip(grad) {
                    *d += w * g;
                }
            }
        }
    }
}

/// Number of pooled bins per region: a 2x2 inner grid plus one context bin.
pub const POOL_BINS: usize = 5;
const CONTEXT_SCALE: f64 = 1.5;

/// The five pooling rectangles for a pixel-space box.
pub fn pool_rects(bbox: &BBox, cell: f64, gw: usize, gh: usize) -> [CellRect; POOL_BINS] {
    let clamp = |b: BBox| {
        let c = b.clamp_to(gw as f64 * cell, gh as f64 * cell);
        CellRect { x1: c.x1 / cell, y1: c.y1 / cell, x2: c.x2 / cell, y2: c.y2 / cell }
    };
    let (cx, cy) = bbox.center();
    let q = [
        BBox::new(bbox.x1, bbox.y1, cx, cy),
        BBox::new(cx, bbox.y1, bbox.x2, cy),
        BBox::new(bbox.x1, cy, cx, bbox.y2),
        BBox::new(cx, cy, bbox.x2, bbox.y2),
    ];
    [clamp(q[0]), clamp(q[1]), clamp(q[2]), clamp(q[3]), clamp(bbox.scaled(CONTEXT_SCALE))]
}

/// Pools `POOL_BINS * ch` features for a box.
pub fn pool(integral: &Integral, bbox: &BBox, cell: f64, out: &mut [f64]) {
    let ch = integral.ch;
    for (k, r) in pool_rects(bbox, cell, integral.gw, integral.gh).iter().enumerate() {
        integral.mean(r, &mut out[k * ch..(k + 1) * ch]);
    }
}

/// Adjoint of [`pool`].
pub fn pool_backward(bbox: &BBox, cell: f64, grad: &[f64], into: &mut FeatureMap) {
    let ch = into.ch;
    for (k, r) in pool_rects(bbox, cell, into.gw, into.gh).iter().enumerate() {
        r.scatter(&grad[k * ch..(k + 1) * ch], into);
    }
}
