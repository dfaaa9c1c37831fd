//! Axis-aligned box arithmetic: IoU, directional overlap, and the pairwise
//! feature block fed to the interaction network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image coordinates, `x1 ≤ x2` and `y1 ≤ y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Length of [`pair_features`].
pub const PAIR_FEATURES: usize = 11;

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1 <= x2 && y1 <= y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    /// From `(x, y, width, height)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of `a` covered by `b`: intersection over the area of `a`.
pub fn overlap_frac(a: &BBox, b: &BBox) -> f64 {
    let area = a.area();
    if area <= 0.0 {
        0.0
    } else {
        (a.intersection(b) / area).clamp(0.0, 1.0)
    }
}

/// `[b_i (4), b_j (4), IoU_ij, O_ij, O_ji]` with coordinates scaled into `[0, 1]`.
pub fn pair_features(a: &BBox, b: &BBox, width: f64, height: f64) -> Result<[f64; PAIR_FEATURES]> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "image size must be positive, got {width}x{height}"
        )));
    }
    let norm = |bx: &BBox| [bx.x1 / width, bx.y1 / height, bx.x2 / width, bx.y2 / height];
    let (na, nb) = (norm(a), norm(b));
    let mut out = [0.0; PAIR_FEATURES];
    out[..4].copy_from_slice(&na);
    out[4..8].copy_from_slice(&nb);
    out[8] = iou(a, b);
    out[9] = overlap_frac(a, b);
    out[10] = overlap_frac(b, a);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn overlap_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(overlap_frac(&a, &a), 1.0);
        assert_eq!(overlap_frac(&a, &bx(1.0, 1.0, 3.0, 3.0)), 0.25);
        assert_eq!(overlap_frac(&bx(0.5, 0.5, 1.0, 1.0), &bx(0.0, 0.0, 10.0, 10.0)), 1.0);
        assert_eq!(overlap_frac(&bx(1.0, 1.0, 1.0, 2.0), &a), 0.0);
    }

    #[test]
    fn pair_feature_tails() {
        let u = bx(0.0, 0.0, 1.0, 1.0);
        let f = pair_features(&u, &u, 1.0, 1.0).unwrap();
        assert_eq!(&f[8..], &[1.0, 1.0, 1.0]);
        let f = pair_features(&u, &bx(2.0, 2.0, 3.0, 3.0), 4.0, 4.0).unwrap();
        assert_eq!(&f[8..], &[0.0, 0.0, 0.0]);
        assert_eq!(&f[4..8], &[0.5, 0.5, 0.75, 0.75]);
        let f = pair_features(&u, &bx(0.0, 0.0, 2.0, 2.0), 2.0, 2.0).unwrap();
        assert_eq!((f[9], f[10]), (1.0, 0.25));
        assert!(pair_features(&u, &u, 0.0, 1.0).is_err());
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-10.0..10.0f64, -10.0..10.0f64, 0.0..5.0f64, 0.0..5.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box(), dx in -5.0..5.0f64, s in 0.1..10.0f64) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!(v >= 0.0);
            prop_assert!(v <= overlap_frac(&a, &b).min(overlap_frac(&b, &a)) + 1e-12);
            prop_assert!(overlap_frac(&a, &b) <= 1.0);
            let tf = |q: &BBox| BBox::new((q.x1 + dx) * s, (q.y1 - dx) * s, (q.x2 + dx) * s, (q.y2 - dx) * s).unwrap();
            prop_assert!((iou(&tf(&a), &tf(&b)) - v).abs() < 1e-9);
        }
    }
}
