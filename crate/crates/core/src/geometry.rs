//! Boxes, anchor grids, overlap, and the center/log-size offset transform.
//!
//! Boxes use corner form `(x1, y1, x2, y2)` in continuous image coordinates;
//! width is `x2 - x1` with no pixel "+1" correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `|tw|`/`|th|` applied when decoding, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Axis-aligned rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and inverted corners.
    /// Zero-area boxes are allowed; [`encode_offsets`] rejects them.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let reason = if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            Some("non-finite coordinate")
        } else if x2 < x1 || y2 < y1 {
            Some("x2 < x1 or y2 < y1")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox { x1, y1, x2, y2, reason }),
            None => Ok(BBox { x1, y1, x2, y2 }),
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// True when both sides are at least `min_size`. A box clipped entirely
    /// outside the image has a zero side and fails this for any positive size.
    pub fn has_min_size(&self, min_size: f64) -> bool {
        self.width() >= min_size && self.height() >= min_size && self.area() > 0.0
    }
}

/// Coordinate of an offset vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coord {
    X,
    Y,
    W,
    H,
}

impl Coord {
    pub const ALL: [Coord; 4] = [Coord::X, Coord::Y, Coord::W, Coord::H];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Coord::X => "x",
            Coord::Y => "y",
            Coord::W => "w",
            Coord::H => "h",
        }
    }
}

/// Regression offsets `(tx, ty, tw, th)` of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets(pub [f64; 4]);

impl Offsets {
    pub const ZERO: Offsets = Offsets([0.0; 4]);

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Offsets([tx, ty, tw, th])
    }

    pub fn tx(&self) -> f64 {
        self.0[0]
    }
    pub fn ty(&self) -> f64 {
        self.0[1]
    }
    pub fn tw(&self) -> f64 {
        self.0[2]
    }
    pub fn th(&self) -> f64 {
        self.0[3]
    }

    pub fn get(&self, c: Coord) -> f64 {
        self.0[c.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Anchor grid layout: one anchor per (cell, scale, ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorGridConfig {
    pub feature_w: usize,
    pub feature_h: usize,
    /// Pixels per feature cell.
    pub stride: f64,
    /// Anchor side lengths in pixels (square-root of the anchor area).
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorGridConfig {
    fn default() -> Self {
        AnchorGridConfig {
            feature_w: 32,
            feature_h: 32,
            stride: 4.0,
            scales: vec![32.0, 45.0, 64.0, 90.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_w == 0 || self.feature_h == 0 {
            return Err(Error::config("grid.feature_w", "grid dimensions must be positive"));
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::config("grid.stride", "must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("grid.scales", "must be non-empty and positive"));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("grid.ratios", "must be non-empty and positive"));
        }
        Ok(())
    }

    pub fn image_width(&self) -> f64 {
        self.feature_w as f64 * self.stride
    }

    pub fn image_height(&self) -> f64 {
        self.feature_h as f64 * self.stride
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.feature_w * self.feature_h * self.anchors_per_cell()
    }
}

/// Intersection over union. Returns 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Dense row-major IoU matrix: rows are anchors, columns ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IouMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

pub fn pairwise_iou(anchors: &[BBox], gts: &[BBox]) -> IouMatrix {
    let mut data = Vec::with_capacity(anchors.len() * gts.len());
    for a in anchors {
        data.extend(gts.iter().map(|g| iou(a, g)));
    }
    IouMatrix {
        rows: anchors.len(),
        cols: gts.len(),
        data,
    }
}

/// Offsets that move `anchor` onto `gt`:
/// `tx = (xg - xa) / wa`, `ty = (yg - ya) / ha`, `tw = ln(wg / wa)`, `th = ln(hg / ha)`.
pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> Result<Offsets> {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (wg, hg) = (gt.width(), gt.height());
    if !(wa > 0.0 && ha > 0.0 && wg > 0.0 && hg > 0.0) {
        return Err(Error::Domain(format!(
            "offset encoding needs positive sizes (anchor {wa}x{ha}, target {wg}x{hg})"
        )));
    }
    let (xa, ya) = anchor.center();
    let (xg, yg) = gt.center();
    let t = Offsets::new((xg - xa) / wa, (yg - ya) / ha, (wg / wa).ln(), (hg / ha).ln());
    if !t.is_finite() {
        return Err(Error::NonFinite("encoded offsets"));
    }
    Ok(t)
}

/// Inverse of [`encode_offsets`]; `tw`/`th` are clamped to `±MAX_LOG_SCALE`.
pub fn decode_offsets(anchor: &BBox, offsets: &Offsets) -> BBox {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (xa, ya) = anchor.center();
    let cx = xa + offsets.tx() * wa;
    let cy = ya + offsets.ty() * ha;
    let w = wa * offsets.tw().clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ha * offsets.th().clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Anchors in row-major cell order, then scales, then ratios. Each ratio
/// keeps the anchor area at `scale²` (`w = s/√r`, `h = s·√r`).
pub fn generate_anchors(cfg: &AnchorGridConfig) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(cfg.anchor_count());
    for row in 0..cfg.feature_h {
        let cy = (row as f64 + 0.5) * cfg.stride;
        for col in 0..cfg.feature_w {
            let cx = (col as f64 + 0.5) * cfg.stride;
            for &scale in &cfg.scales {
                for &ratio in &cfg.ratios {
                    let root = ratio.sqrt();
                    let (w, h) = (scale / root, scale * root);
                    anchors.push(BBox {
                        x1: cx - 0.5 * w,
                        y1: cy - 0.5 * h,
                        x2: cx + 0.5 * w,
                        y2: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    anchors
}

/// Clamps every coordinate into `[0, image_w] x [0, image_h]`.
pub fn clip_box(b: &BBox, image_w: f64, image_h: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, image_w),
        y1: b.y1.clamp(0.0, image_h),
        x2: b.x2.clamp(0.0, image_w),
        y2: b.y2.clamp(0.0, image_h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 1, union 4 + 4 - 1 = 7
        assert_abs_diff_eq!(iou(&a, &bx(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0, epsilon = 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(2.0, 0.0, 4.0, 2.0)), 0.0);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn pairwise_shapes() {
        let a = bx(0.0, 0.0, 4.0, 4.0);
        let m = pairwise_iou(&[a], &[a]);
        assert_eq!(m.get(0, 0), 1.0);
        let empty = pairwise_iou(&[a, a], &[]);
        assert_eq!((empty.rows(), empty.cols()), (2, 0));
        assert!(empty.row(1).is_empty());

        let anchors = [a, bx(2.0, 2.0, 6.0, 6.0)];
        let gts = [bx(1.0, 1.0, 3.0, 5.0), bx(3.0, 0.0, 9.0, 4.0)];
        let m = pairwise_iou(&anchors, &gts);
        for (i, an) in anchors.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                assert_eq!(m.get(i, j), iou(an, g));
            }
        }
    }

    #[test]
    fn encode_examples() {
        let anchor = BBox::from_center(10.0, 10.0, 4.0, 4.0).unwrap();
        assert_eq!(encode_offsets(&anchor, &anchor).unwrap(), Offsets::ZERO);

        let gt = BBox::from_center(12.0, 10.0, 8.0, 4.0).unwrap();
        let t = encode_offsets(&anchor, &gt).unwrap();
        assert_abs_diff_eq!(t.tx(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t.ty(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.tw(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(t.th(), 0.0, epsilon = 1e-12);

        let back = decode_offsets(&anchor, &t);
        for (u, v) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            assert_abs_diff_eq!(u, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn encode_rejects_degenerate() {
        let anchor = bx(0.0, 0.0, 4.0, 4.0);
        assert!(encode_offsets(&anchor, &bx(1.0, 1.0, 1.0, 3.0)).is_err());
        assert!(encode_offsets(&bx(1.0, 1.0, 1.0, 3.0), &anchor).is_err());
    }

    #[test]
    fn decode_zero_and_clamp() {
        let anchor = bx(0.0, 0.0, 16.0, 16.0);
        assert_eq!(decode_offsets(&anchor, &Offsets::ZERO), anchor);

        let huge = decode_offsets(&anchor, &Offsets::new(0.0, 0.0, 50.0, -50.0));
        assert_abs_diff_eq!(huge.width(), 1000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(huge.height(), 16.0 * 16.0 / 1000.0, epsilon = 1e-12);
        assert_abs_diff_eq!(MAX_LOG_SCALE, (1000.0f64 / 16.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn anchor_examples() {
        let cfg = AnchorGridConfig {
            feature_w: 1,
            feature_h: 1,
            stride: 16.0,
            scales: vec![16.0],
            ratios: vec![1.0],
        };
        assert_eq!(generate_anchors(&cfg), vec![bx(0.0, 0.0, 16.0, 16.0)]);

        let tall = generate_anchors(&AnchorGridConfig {
            ratios: vec![2.0],
            ..cfg.clone()
        })[0];
        assert_abs_diff_eq!(tall.height() / tall.width(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tall.area(), 256.0, epsilon = 1e-9);
        let (cx, cy) = tall.center();
        assert_abs_diff_eq!(cx, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cy, 8.0, epsilon = 1e-12);

        let grid = AnchorGridConfig {
            feature_w: 2,
            feature_h: 2,
            ..cfg
        };
        let anchors = generate_anchors(&grid);
        assert_eq!(anchors.len(), 4);
        // row-major: second anchor is one cell to the right
        assert_eq!(anchors[1].center(), (24.0, 8.0));
        assert_eq!(anchors[2].center(), (8.0, 24.0));
    }

    #[test]
    fn anchor_order_scales_then_ratios() {
        let cfg = AnchorGridConfig {
            feature_w: 2,
            feature_h: 1,
            stride: 8.0,
            scales: vec![8.0, 16.0],
            ratios: vec![0.5, 2.0],
        };
        let anchors = generate_anchors(&cfg);
        assert_eq!(anchors.len(), cfg.anchor_count());
        assert!(anchors[1].height() > anchors[1].width());
        assert_abs_diff_eq!(anchors[2].area(), 256.0, epsilon = 1e-9);
        assert_eq!(anchors[4].center(), (12.0, 4.0));
        assert_eq!(anchors, generate_anchors(&cfg));
    }

    #[test]
    fn clip_examples() {
        let inner = bx(1.0, 1.0, 5.0, 5.0);
        assert_eq!(clip_box(&inner, 8.0, 8.0), inner);
        assert_eq!(clip_box(&bx(-5.0, -5.0, 10.0, 10.0), 8.0, 8.0), bx(0.0, 0.0, 8.0, 8.0));
        let outside = clip_box(&bx(20.0, 1.0, 30.0, 5.0), 8.0, 8.0);
        assert_eq!(outside.width(), 0.0);
        assert!(!outside.has_min_size(1.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 1.0..1000.0f64, 1.0..1000.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        // size ratios stay inside the decode clamp, otherwise decoding saturates
        #[test]
        fn encode_decode_round_trip(
            anchor in arb_box(),
            (gx, gy) in (-500.0..500.0f64, -500.0..500.0f64),
            (lw, lh) in (-4.1..4.1f64, -4.1..4.1f64),
        ) {
            let gw = (anchor.width() * lw.exp()).clamp(1.0, 1000.0);
            let gh = (anchor.height() * lh.exp()).clamp(1.0, 1000.0);
            let gt = BBox::new(gx, gy, gx + gw, gy + gh).unwrap();
            let back = decode_offsets(&anchor, &encode_offsets(&anchor, &gt).unwrap());
            for (u, v) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
                prop_assert!((u - v).abs() <= 1e-9, "{} vs {}", u, v);
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}
