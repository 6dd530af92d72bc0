//! Seeded synthetic scenes with engineered per-anchor features.
//!
//! Each anchor's feature vector stands in for what a backbone would see:
//!
//! | channels | content |
//! |----------|---------|
//! | `0..4`   | offsets to the best-overlapping object when the anchor is foreground, else zero; plus Gaussian noise |
//! | `4`      | foreground indicator (best IoU with a ground truth ≥ `fg_iou`) plus noise |
//! | `5`      | ambiguity flag |
//! | `6..F`   | padding noise |
//!
//! On ambiguous anchors the offset noise standard deviation is multiplied by
//! `ambiguity_boost`, so its variance grows by `ambiguity_boost²`. Anchors
//! inherit the ambiguity flag of the object they overlap most;
//! anchors touching no object draw it independently with the same
//! probability, so the flag carries no information about the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, generate_anchors, iou, AnchorGridConfig, BBox};

pub const OFFSET_CHANNELS: std::ops::Range<usize> = 0..4;
pub const FOREGROUND_CHANNEL: usize = 4;
pub const AMBIGUITY_CHANNEL: usize = 5;
/// Smallest feature dimension that holds the engineered channels.
pub const MIN_FEATURE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels (geometric mean of width and height).
    pub min_size: f64,
    pub max_size: f64,
    /// Largest width/height (or height/width) ratio of an object.
    pub max_aspect: f64,
    pub feature_dim: usize,
    /// Offset-channel noise on clear anchors; scaled by `ambiguity_boost`
    /// on ambiguous ones.
    pub offset_noise: f64,
    pub fg_iou: f64,
    pub fg_noise: f64,
    pub ambiguity_prob: f64,
    pub ambiguity_boost: f64,
    pub padding_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_objects: 1,
            max_objects: 5,
            min_size: 32.0,
            max_size: 90.0,
            max_aspect: 2.0,
            feature_dim: 8,
            offset_noise: 0.01,
            fg_iou: 0.5,
            fg_noise: 0.1,
            ambiguity_prob: 0.5,
            ambiguity_boost: 5.0,
            padding_noise: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, grid: &AnchorGridConfig) -> Result<()> {
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(Error::config(
                "scene.max_objects",
                "need 1 <= min_objects <= max_objects",
            ));
        }
        if !(self.min_size >= 1.0 && self.max_size >= self.min_size) {
            return Err(Error::config("scene.min_size", "need 1 <= min_size <= max_size"));
        }
        let fit = self.max_size * self.max_aspect.sqrt();
        if fit > grid.image_width() || fit > grid.image_height() {
            return Err(Error::config("scene.max_size", "objects must fit inside the image"));
        }
        if !(self.max_aspect >= 1.0) {
            return Err(Error::config("scene.max_aspect", "must be at least 1"));
        }
        if self.feature_dim < MIN_FEATURE_DIM {
            return Err(Error::config(
                "scene.feature_dim",
                format!("must be at least {MIN_FEATURE_DIM}"),
            ));
        }
        for (field, v) in [
            ("scene.offset_noise", self.offset_noise),
            ("scene.fg_noise", self.fg_noise),
            ("scene.padding_noise", self.padding_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.ambiguity_prob) {
            return Err(Error::config("scene.ambiguity_prob", "must lie in [0, 1]"));
        }
        if !(self.ambiguity_boost >= 1.0) {
            return Err(Error::config("scene.ambiguity_boost", "must be at least 1"));
        }
        if !(self.fg_iou > 0.0 && self.fg_iou <= 1.0) {
            return Err(Error::config("scene.fg_iou", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Row-major `rows x dim` matrix of anchor features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        FeatureMatrix {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Image size and ground truths of a scene, without anchor features.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub seed: u64,
    pub image_w: f64,
    pub image_h: f64,
    pub gt_boxes: Vec<BBox>,
    pub gt_ambiguous: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image_w: f64,
    pub image_h: f64,
    pub gt_boxes: Vec<BBox>,
    pub gt_ambiguous: Vec<bool>,
    /// One row per anchor of the grid, in anchor order.
    pub features: FeatureMatrix,
    pub foreground: Vec<bool>,
    pub ambiguous: Vec<bool>,
}

/// Mixes a master seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z =
        master ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ANCHOR_STREAM: u64 = 0x616e;

fn gauss<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

pub fn gen_layout(seed: u64, grid: &AnchorGridConfig, params: &SceneConfig) -> SceneLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image_w, image_h) = (grid.image_width(), grid.image_height());

    let n_objects = rng.random_range(params.min_objects..=params.max_objects);
    let mut gt_boxes = Vec::with_capacity(n_objects);
    let mut gt_ambiguous = Vec::with_capacity(n_objects);
    let (log_lo, log_hi) = (params.min_size.ln(), params.max_size.ln());
    let log_aspect = params.max_aspect.ln();
    for _ in 0..n_objects {
        let side = if log_hi > log_lo {
            rng.random_range(log_lo..log_hi).exp()
        } else {
            params.min_size
        };
        let aspect = if log_aspect > 0.0 {
            rng.random_range(-log_aspect..log_aspect).exp()
        } else {
            1.0
        };
        let w = (side / aspect.sqrt()).min(image_w);
        let h = (side * aspect.sqrt()).min(image_h);
        let x1 = rng.random_range(0.0..=(image_w - w));
        let y1 = rng.random_range(0.0..=(image_h - h));
        gt_boxes.push(BBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        });
        gt_ambiguous.push(rng.random_bool(params.ambiguity_prob));
    }
    SceneLayout {
        seed,
        image_w,
        image_h,
        gt_boxes,
        gt_ambiguous,
    }
}

/// Writes the features of anchor `index` into `row` and returns its
/// `(foreground, ambiguous)` flags.
///
/// Each anchor draws from its own stream, so any subset of anchors can be
/// generated without the rest of the scene.
pub fn anchor_features(
    layout: &SceneLayout,
    index: usize,
    anchor: &BBox,
    params: &SceneConfig,
    row: &mut [f64],
) -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(layout.seed, ANCHOR_STREAM, index as u64));
    let (best_gt, best) = layout.gt_boxes.iter().enumerate().fold((0, 0.0), |acc, (j, g)| {
        let v = iou(anchor, g);
        if v > acc.1 {
            (j, v)
        } else {
            acc
        }
    });
    let fg = best >= params.fg_iou;
    let amb = if best > 0.0 {
        layout.gt_ambiguous[best_gt]
    } else {
        rng.random_bool(params.ambiguity_prob)
    };
    let noise = params.offset_noise * if amb { params.ambiguity_boost } else { 1.0 };
    let clean = if fg {
        // anchors and objects both have positive size
        encode_offsets(anchor, &layout.gt_boxes[best_gt])
            .expect("positive-size boxes")
            .0
    } else {
        [0.0; 4]
    };

    for c in OFFSET_CHANNELS {
        row[c] = clean[c] + gauss(&mut rng, noise);
    }
    row[FOREGROUND_CHANNEL] = if fg { 1.0 } else { 0.0 } + gauss(&mut rng, params.fg_noise);
    row[AMBIGUITY_CHANNEL] = if amb { 1.0 } else { 0.0 };
    for v in &mut row[MIN_FEATURE_DIM..] {
        *v = gauss(&mut rng, params.padding_noise);
    }
    (fg, amb)
}

/// Features of the anchors at `indices`, one row each, in that order.
pub fn features_for(layout: &SceneLayout, anchors: &[BBox], indices: &[usize], params: &SceneConfig) -> FeatureMatrix {
    let mut features = FeatureMatrix::zeros(indices.len(), params.feature_dim);
    for (r, &i) in indices.iter().enumerate() {
        anchor_features(layout, i, &anchors[i], params, features.row_mut(r));
    }
    features
}

pub fn gen_scene(seed: u64, grid: &AnchorGridConfig, params: &SceneConfig) -> SyntheticScene {
    let anchors = generate_anchors(grid);
    gen_scene_for_anchors(seed, grid, &anchors, params)
}

/// [`gen_scene`] with the grid's anchors already generated.
pub fn gen_scene_for_anchors(
    seed: u64,
    grid: &AnchorGridConfig,
    anchors: &[BBox],
    params: &SceneConfig,
) -> SyntheticScene {
    let layout = gen_layout(seed, grid, params);
    let mut features = FeatureMatrix::zeros(anchors.len(), params.feature_dim);
    let mut foreground = Vec::with_capacity(anchors.len());
    let mut ambiguous = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let (fg, amb) = anchor_features(&layout, i, anchor, params, features.row_mut(i));
        foreground.push(fg);
        ambiguous.push(amb);
    }
    SyntheticScene {
        image_w: layout.image_w,
        image_h: layout.image_h,
        gt_boxes: layout.gt_boxes,
        gt_ambiguous: layout.gt_ambiguous,
        features,
        foreground,
        ambiguous,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pairwise_iou;

    fn small_grid() -> AnchorGridConfig {
        AnchorGridConfig::default()
    }

    #[test]
    fn same_seed_same_scene() {
        let p = SceneConfig::default();
        assert_eq!(gen_scene(11, &small_grid(), &p), gen_scene(11, &small_grid(), &p));
        assert_ne!(gen_scene(11, &small_grid(), &p), gen_scene(12, &small_grid(), &p));
    }

    #[test]
    fn scene_invariants() {
        let grid = small_grid();
        let p = SceneConfig::default();
        for seed in 0..50 {
            let s = gen_scene(seed, &grid, &p);
            assert_eq!(s.features.rows(), grid.anchor_count());
            assert_eq!(s.features.dim(), p.feature_dim);
            assert!((p.min_objects..=p.max_objects).contains(&s.gt_boxes.len()));
            for g in &s.gt_boxes {
                assert!(g.x1 >= 0.0 && g.y1 >= 0.0 && g.x2 <= s.image_w && g.y2 <= s.image_h);
                assert!(g.width() >= 1.0 && g.height() >= 1.0);
            }
        }
    }

    #[test]
    fn noiseless_features_encode_exact_offsets() {
        let grid = small_grid();
        let p = SceneConfig {
            offset_noise: 0.0,
            fg_noise: 0.0,
            padding_noise: 0.0,
            ambiguity_prob: 0.0,
            ..SceneConfig::default()
        };
        let anchors = generate_anchors(&grid);
        let s = gen_scene(5, &grid, &p);
        let overlaps = pairwise_iou(&anchors, &s.gt_boxes);
        let mut fg_seen = 0;
        for (i, a) in anchors.iter().enumerate() {
            let row = s.features.row(i);
            assert!(!s.ambiguous[i]);
            assert_eq!(row[AMBIGUITY_CHANNEL], 0.0);
            if s.foreground[i] {
                fg_seen += 1;
                let j = (0..s.gt_boxes.len())
                    .max_by(|&x, &y| overlaps.get(i, x).total_cmp(&overlaps.get(i, y)).then(y.cmp(&x)))
                    .unwrap();
                let t = encode_offsets(a, &s.gt_boxes[j]).unwrap();
                assert_eq!(&row[OFFSET_CHANNELS], &t.0[..]);
                assert_eq!(row[FOREGROUND_CHANNEL], 1.0);
            } else {
                assert_eq!(&row[OFFSET_CHANNELS], &[0.0; 4]);
            }
            assert!(row[MIN_FEATURE_DIM..].iter().all(|&v| v == 0.0));
        }
        assert!(fg_seen > 0);
    }

    #[test]
    fn ambiguous_noise_variance_scales_with_boost_squared() {
        // offset channels of background anchors are pure noise
        let grid = small_grid();
        let p = SceneConfig::default();
        let (mut amb, mut clear) = (Vec::new(), Vec::new());
        let mut seed = 0;
        while amb.len() + clear.len() < 100_000 {
            let s = gen_scene(derive_seed(99, 0, seed), &grid, &p);
            seed += 1;
            for i in 0..s.features.rows() {
                if s.foreground[i] {
                    continue;
                }
                let v = s.features.row(i)[0];
                if s.ambiguous[i] {
                    amb.push(v)
                } else {
                    clear.push(v)
                }
            }
        }
        let var = |xs: &[f64]| xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
        let ratio = var(&amb) / var(&clear);
        let expected = p.ambiguity_boost * p.ambiguity_boost;
        assert!(
            (ratio / expected - 1.0).abs() < 0.05,
            "ratio {ratio}, expected {expected}"
        );
        assert!((var(&clear) / (p.offset_noise * p.offset_noise) - 1.0).abs() < 0.05);
    }

    #[test]
    fn anchor_subsets_match_full_scene() {
        let grid = small_grid();
        let p = SceneConfig::default();
        let anchors = generate_anchors(&grid);
        let full = gen_scene_for_anchors(21, &grid, &anchors, &p);
        let layout = gen_layout(21, &grid, &p);
        assert_eq!(layout.gt_boxes, full.gt_boxes);
        let picked = [anchors.len() - 1, 0, 517, 3];
        let sub = features_for(&layout, &anchors, &picked, &p);
        for (r, &i) in picked.iter().enumerate() {
            assert_eq!(sub.row(r), full.features.row(i));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 9), derive_seed(7, 3, 9));
    }

    #[test]
    fn validation_names_fields() {
        let grid = small_grid();
        let bad = SceneConfig {
            feature_dim: 3,
            ..SceneConfig::default()
        };
        match bad.validate(&grid) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scene.feature_dim"),
            other => panic!("{other:?}"),
        }
        assert!(SceneConfig::default().validate(&grid).is_ok());
    }
}
