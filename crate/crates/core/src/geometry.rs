//! Axis-aligned boxes and the standard `(dx, dy, dw, dh)` box-delta parameterization.

use serde::{Deserialize, Serialize};

/// Upper bound on `dw`/`dh` before exponentiation, as in the reference detector family.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Box in pixel units, `(x1, y1)` top-left inclusive, `(x2, y2)` bottom-right exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Box regression target / prediction `(dx, dy, dw, dh)`.
pub type BoxDelta = [f64; 4];

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Zero for degenerate boxes.
    pub fn area(&self) -> f64 {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            0.0
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Intersection over union; a degenerate box has IoU 0 against anything.
    pub fn iou(&self, other: &BBox) -> f64 {
        let a = self.area();
        let b = other.area();
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        inter / (a + b - inter)
    }

    /// Delta that maps `self` onto `target`.
    pub fn encode(&self, target: &BBox) -> BoxDelta {
        let (cx, cy) = self.center();
        let (tx, ty) = target.center();
        let (w, h) = (self.width(), self.height());
        [
            (tx - cx) / w,
            (ty - cy) / h,
            (target.width() / w).ln(),
            (target.height() / h).ln(),
        ]
    }

    /// Inverse of [`BBox::encode`]; `dw`/`dh` are clamped at [`DELTA_CLAMP`].
    pub fn decode(&self, delta: &BoxDelta) -> BBox {
        let (cx, cy) = self.center();
        let (w, h) = (self.width(), self.height());
        let ncx = cx + delta[0] * w;
        let ncy = cy + delta[1] * h;
        let nw = w * delta[2].min(DELTA_CLAMP).exp();
        let nh = h * delta[3].min(DELTA_CLAMP).exp();
        BBox::from_center(ncx, ncy, nw, nh)
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`.
    pub fn total_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn from_xywh(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_by_area() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(a.iou(&BBox::new(3.0, 3.0, 3.0, 8.0)), 0.0);
    }

    #[test]
    fn zero_delta_is_identity() {
        let b = BBox::new(3.0, 4.0, 17.0, 30.0);
        assert_eq!(b.decode(&[0.0; 4]), b);
    }

    #[test]
    fn log2_width_delta_doubles_width() {
        let b = BBox::new(10.0, 10.0, 20.0, 30.0);
        let d = b.decode(&[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.width() - 20.0).abs() < 1e-12);
        assert!((d.height() - 20.0).abs() < 1e-12);
        assert_eq!(d.center(), b.center());
    }

    #[test]
    fn xywh_convention() {
        let b = BBox::from_xywh([10.0, 20.0, 30.0, 40.0]);
        assert_eq!(b, BBox::new(10.0, 20.0, 40.0, 60.0));
        assert_eq!(b.to_xywh(), [10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn encode_decode_inverse() {
        let a = BBox::new(4.0, 6.0, 20.0, 18.0);
        let t = BBox::new(7.5, 2.0, 30.0, 21.0);
        let d = a.decode(&a.encode(&t));
        for (x, y) in [(d.x1, t.x1), (d.y1, t.y1), (d.x2, t.x2), (d.y2, t.y2)] {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
