//! Axis-aligned boxes in normalized image coordinates.
//!
//! Every coordinate is a fraction of the image width (x, w) or height (y, h),
//! so a box of the full frame is `cx = cy = 0.5, w = h = 1`. Offsets between
//! consecutive boxes are plain componentwise differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest width/height a decoded box may take.
pub const MIN_DIM: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    /// Box from `(left, top, width, height)` in normalized units.
    pub fn from_ltwh(left: f64, top: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(left + 0.5 * w, top + 0.5 * h, w, h)
    }

    /// Box from `(left, top, width, height)` in pixels of an image of the given size.
    pub fn from_pixels(left: f64, top: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> Result<Self> {
        Self::from_ltwh(left / img_w, top / img_h, w / img_w, h / img_h)
    }

    pub fn to_ltwh(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.w, self.h]
    }

    pub fn to_pixels(&self, img_w: f64, img_h: f64) -> [f64; 4] {
        let [l, t, w, h] = self.to_ltwh();
        [l * img_w, t * img_h, w * img_w, h * img_h]
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Aspect ratio `w / h`.
    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // areas from the same corners keep iou(a, a) exactly 1
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-frame change of a box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset4 {
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_w: f64,
    pub d_h: f64,
}

impl Offset4 {
    pub const ZERO: Self = Self { d_cx: 0.0, d_cy: 0.0, d_w: 0.0, d_h: 0.0 };

    pub fn new(d_cx: f64, d_cy: f64, d_w: f64, d_h: f64) -> Self {
        Self { d_cx, d_cy, d_w, d_h }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.d_cx, self.d_cy, self.d_w, self.d_h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn encode_offset(prev: &BBox, next: &BBox) -> Offset4 {
    Offset4 {
        d_cx: next.cx - prev.cx,
        d_cy: next.cy - prev.cy,
        d_w: next.w - prev.w,
        d_h: next.h - prev.h,
    }
}

/// Counts decoded boxes that had to be pulled back into the valid range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampCounter {
    pub center: usize,
    pub dims: usize,
}

impl ClampCounter {
    pub fn total(&self) -> usize {
        self.center + self.dims
    }
}

/// Apply `off` to `base`. Centers are clamped into `[0, 1]`; width and
/// height are floored at [`MIN_DIM`]. Every clamp is recorded in `clamps`.
pub fn decode_offset(base: &BBox, off: &Offset4, clamps: &mut ClampCounter) -> BBox {
    let mut cx = base.cx + off.d_cx;
    let mut cy = base.cy + off.d_cy;
    let mut w = base.w + off.d_w;
    let mut h = base.h + off.d_h;
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        clamps.center += 1;
        cx = if cx.is_nan() { base.cx } else { cx.clamp(0.0, 1.0) };
        cy = if cy.is_nan() { base.cy } else { cy.clamp(0.0, 1.0) };
    }
    // NaN compares false, so it lands in the floor branch too.
    if !(w >= MIN_DIM) || !(h >= MIN_DIM) {
        clamps.dims += 1;
        if !(w >= MIN_DIM) {
            w = MIN_DIM;
        }
        if !(h >= MIN_DIM) {
            h = MIN_DIM;
        }
    }
    BBox { cx, cy, w, h }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(0.3, 0.4, 0.2, 0.1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.1, 0.1, 0.1, 0.1), &b(0.9, 0.9, 0.1, 0.1)), 0.0);
    }

    #[test]
    fn iou_corner_form_by_hand() {
        let a = BBox::from_pixels(0.0, 0.0, 2.0, 2.0, 10.0, 10.0).unwrap();
        let c = BBox::from_pixels(1.0, 0.0, 2.0, 2.0, 10.0, 10.0).unwrap();
        assert!((iou(&a, &c) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn encode_examples() {
        let p = b(0.5, 0.5, 0.1, 0.2);
        assert_eq!(encode_offset(&p, &p), Offset4::ZERO);
        let n = b(0.52, 0.5, 0.1, 0.2);
        let o = encode_offset(&p, &n);
        assert!((o.d_cx - 0.02).abs() < 1e-15);
        assert_eq!((o.d_cy, o.d_w, o.d_h), (0.0, 0.0, 0.0));
    }

    #[test]
    fn decode_zero_and_floor() {
        let mut c = ClampCounter::default();
        let base = b(0.5, 0.5, 0.01, 0.1);
        assert_eq!(decode_offset(&base, &Offset4::ZERO, &mut c), base);
        assert_eq!(c.total(), 0);
        let d = decode_offset(&base, &Offset4::new(0.0, 0.0, -0.02, 0.0), &mut c);
        assert_eq!(d.w, MIN_DIM);
        assert_eq!(c.dims, 1);
        let d = decode_offset(&base, &Offset4::new(0.7, 0.0, 0.0, 0.0), &mut c);
        assert_eq!(d.cx, 1.0);
        assert_eq!(c.center, 1);
    }

    #[test]
    fn iou_monotone_under_translation() {
        let a = b(0.5, 0.5, 0.2, 0.2);
        let mut last = 1.0;
        for k in 0..60 {
            let s = b(0.5 + k as f64 * 0.005, 0.5, 0.2, 0.2);
            let v = iou(&a, &s);
            assert!(v <= last + 1e-15);
            last = v;
        }
        assert_eq!(last, 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.001..0.5f64, 0.001..0.5f64).prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let x = iou(&a, &c);
            prop_assert_eq!(x, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_roundtrip(p in arb_box(), n in arb_box()) {
            let mut c = ClampCounter::default();
            let d = decode_offset(&p, &encode_offset(&p, &n), &mut c);
            prop_assert_eq!(c.total(), 0);
            for (x, y) in [(d.cx, n.cx), (d.cy, n.cy), (d.w, n.w), (d.h, n.h)] {
                prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON);
            }
        }

        #[test]
        fn corner_roundtrip(p in arb_box()) {
            let [l, t, w, h] = p.to_ltwh();
            let q = BBox::from_ltwh(l, t, w, h).unwrap();
            prop_assert!((q.cx - p.cx).abs() <= 2.0 * f64::EPSILON);
            prop_assert!((q.cy - p.cy).abs() <= 2.0 * f64::EPSILON);
        }
    }
}
