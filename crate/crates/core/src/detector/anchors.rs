//! Fixed anchor grid and box-delta coding.

use crate::evaluation::BBox;

/// Every `(w, h)` anchor whose top-left corner lies on the `stride` grid and
/// which fits entirely inside the image.
pub fn anchor_grid(width: f64, height: f64, stride: f64, shapes: &[(f64, f64)]) -> Vec<BBox> {
    let mut out = Vec::new();
    for &(w, h) in shapes {
        let mut y = 0.0;
        while y + h <= height + 1e-9 {
            let mut x = 0.0;
            while x + w <= width + 1e-9 {
                out.push(BBox::new(x, y, x + w, y + h));
                x += stride;
            }
            y += stride;
        }
    }
    out
}

/// Normalizing divisors applied to `(dx, dy, dw, dh)`.
pub const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000/16)

/// Regression target taking `from` onto `to`, already divided by [`DELTA_STD`].
pub fn encode(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.width() / DELTA_STD[0],
        (ty - fy) / from.height() / DELTA_STD[1],
        (to.width() / from.width()).ln() / DELTA_STD[2],
        (to.height() / from.height()).ln() / DELTA_STD[3],
    ]
}

/// Inverse of [`encode`]; scale deltas are clipped to keep boxes finite.
pub fn decode(from: &BBox, deltas: &[f64]) -> BBox {
    let (fx, fy) = from.center();
    let dw = (deltas[2] * DELTA_STD[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] * DELTA_STD[3]).min(MAX_LOG_SCALE);
    BBox::from_center(
        fx + deltas[0] * DELTA_STD[0] * from.width(),
        fy + deltas[1] * DELTA_STD[1] * from.height(),
        from.width() * dw.exp(),
        from.height() * dh.exp(),
    )
}

/// Smooth-L1 with unit transition point; returns value and derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_inverts_encode() {
        let a = BBox::new(10.0, 20.0, 120.0, 150.0);
        let b = BBox::new(14.5, 11.0, 140.0, 149.0);
        let d = decode(&a, &encode(&a, &b));
        for (x, y) in [(d.x1, b.x1), (d.y1, b.y1), (d.x2, b.x2), (d.y2, b.y2)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_stays_inside_image() {
        let g = anchor_grid(320.0, 320.0, 20.0, &[(110.0, 110.0), (150.0, 110.0)]);
        assert!(g.iter().all(|b| b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 320.0 && b.y2 <= 320.0));
        // 11 x 11 positions for the square, 9 x 11 for the wide one
        assert_eq!(g.len(), 121 + 99);
    }
}
