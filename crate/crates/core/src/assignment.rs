//! Anchor labelling by IoU and the target distribution attached to each label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, pairwise_iou, BBox, Offsets};

/// Variance of the wide negative target per coordinate, the variance of a
/// uniform distribution on `[-1, 1]`.
pub const DEFAULT_NEGATIVE_VARIANCE: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssignmentLabel {
    /// Matched to the ground truth at this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl AssignmentLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AssignmentLabel::Positive(_))
    }

    pub fn is_negative(&self) -> bool {
        matches!(self, AssignmentLabel::Negative)
    }
}

/// Distribution the predicted Gaussian is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetDistribution {
    /// All mass at the ground-truth offsets.
    Dirac(Offsets),
    /// Zero-mean Gaussian with this variance on every coordinate.
    WideGaussian { variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub pos_iou_threshold: f64,
    pub neg_iou_threshold: f64,
    pub minibatch_size: usize,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            pos_iou_threshold: 0.7,
            neg_iou_threshold: 0.3,
            minibatch_size: 256,
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pos_iou_threshold) {
            return Err(Error::config("assignment.pos_iou_threshold", "must lie in [0, 1]"));
        }
        if !(self.neg_iou_threshold >= 0.0 && self.neg_iou_threshold < self.pos_iou_threshold) {
            return Err(Error::config(
                "assignment.neg_iou_threshold",
                "must satisfy 0 <= neg_iou_threshold < pos_iou_threshold",
            ));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::config("assignment.positive_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Labels every anchor.
///
/// An anchor is positive when its best IoU reaches `pos_iou_threshold`
/// (matched to the best ground truth, lowest index on ties), or when it is
/// the highest-IoU anchor of some ground truth with non-zero overlap (lowest
/// anchor index on ties). The second rule wins over the negative threshold.
/// Remaining anchors below `neg_iou_threshold` are negative, the rest ignored.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], cfg: &AssignmentConfig) -> Vec<AssignmentLabel> {
    if gts.is_empty() {
        return vec![AssignmentLabel::Negative; anchors.len()];
    }
    let overlaps = pairwise_iou(anchors, gts);

    let mut labels: Vec<AssignmentLabel> = (0..anchors.len())
        .map(|i| {
            let (best_gt, best) = argmax(overlaps.row(i));
            if best >= cfg.pos_iou_threshold {
                AssignmentLabel::Positive(best_gt)
            } else if best < cfg.neg_iou_threshold {
                AssignmentLabel::Negative
            } else {
                AssignmentLabel::Ignore
            }
        })
        .collect();

    for gt in 0..gts.len() {
        let mut best_anchor = None;
        let mut best = 0.0;
        for i in 0..anchors.len() {
            let v = overlaps.get(i, gt);
            if v > best {
                best = v;
                best_anchor = Some(i);
            }
        }
        if let Some(i) = best_anchor {
            if !labels[i].is_positive() {
                labels[i] = AssignmentLabel::Positive(gt);
            }
        }
    }
    labels
}

fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Target per anchor, `None` for ignored anchors.
pub fn build_targets(
    labels: &[AssignmentLabel],
    anchors: &[BBox],
    gts: &[BBox],
    sigma1_sq: f64,
) -> Result<Vec<Option<TargetDistribution>>> {
    if labels.len() != anchors.len() {
        return Err(Error::DimensionMismatch {
            expected: anchors.len(),
            got: labels.len(),
        });
    }
    if !(sigma1_sq > 0.0 && sigma1_sq.is_finite()) {
        return Err(Error::Domain(format!(
            "negative target variance must be positive, got {sigma1_sq}"
        )));
    }
    labels
        .iter()
        .zip(anchors)
        .map(|(label, anchor)| match *label {
            AssignmentLabel::Positive(j) => {
                let gt = gts.get(j).ok_or(Error::DimensionMismatch {
                    expected: gts.len(),
                    got: j + 1,
                })?;
                encode_offsets(anchor, gt).map(|t| Some(TargetDistribution::Dirac(t)))
            }
            AssignmentLabel::Negative => Ok(Some(TargetDistribution::WideGaussian { variance: sigma1_sq })),
            AssignmentLabel::Ignore => Ok(None),
        })
        .collect()
}

/// Samples up to `minibatch_size` anchor indices, at most
/// `positive_fraction * minibatch_size` of them positive, the rest negative.
/// Positives come first, each group in ascending index order.
pub fn sample_minibatch<R: Rng + ?Sized>(
    labels: &[AssignmentLabel],
    cfg: &AssignmentConfig,
    rng: &mut R,
) -> Vec<usize> {
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_negative()).collect();

    let pos_cap = (cfg.positive_fraction * cfg.minibatch_size as f64).floor() as usize;
    let n_pos = positives.len().min(pos_cap);
    let n_neg = negatives.len().min(cfg.minibatch_size - n_pos);

    let mut out = choose_sorted(&positives, n_pos, rng);
    out.extend(choose_sorted(&negatives, n_neg, rng));
    out
}

fn choose_sorted<R: Rng + ?Sized>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cfg() -> AssignmentConfig {
        AssignmentConfig::default()
    }

    #[test]
    fn identical_anchor_is_positive() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let labels = assign_anchors(&[g, bx(50.0, 50.0, 60.0, 60.0)], &[g], &cfg());
        assert_eq!(labels, vec![AssignmentLabel::Positive(0), AssignmentLabel::Negative]);
    }

    #[test]
    fn best_anchor_below_threshold_is_positive() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let half = bx(0.0, 0.0, 10.0, 5.0);
        assert_eq!(crate::geometry::iou(&half, &g), 0.5);
        let labels = assign_anchors(&[half, bx(40.0, 40.0, 50.0, 50.0)], &[g], &cfg());
        assert_eq!(labels[0], AssignmentLabel::Positive(0));
    }

    #[test]
    fn middle_band_is_ignored_and_low_is_negative() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let best = g;
        let mid = bx(0.0, 0.0, 10.0, 5.0); // 0.5
        let low = bx(0.0, 0.0, 10.0, 1.0); // 0.1
        let labels = assign_anchors(&[best, mid, low], &[g], &cfg());
        assert_eq!(
            labels,
            vec![
                AssignmentLabel::Positive(0),
                AssignmentLabel::Ignore,
                AssignmentLabel::Negative
            ]
        );
    }

    #[test]
    fn empty_gts_all_negative() {
        let labels = assign_anchors(&[bx(0.0, 0.0, 1.0, 1.0); 3], &[], &cfg());
        assert!(labels.iter().all(|l| l.is_negative()));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let g0 = bx(0.0, 0.0, 10.0, 10.0);
        let labels = assign_anchors(&[g0, g0], &[g0, g0], &cfg());
        assert_eq!(labels, vec![AssignmentLabel::Positive(0), AssignmentLabel::Positive(0)]);

        // two anchors sharing a gt's best IoU below threshold: only the first is forced
        let a = bx(0.0, 0.0, 10.0, 5.0);
        let b = bx(0.0, 5.0, 10.0, 10.0);
        let labels = assign_anchors(&[a, b], &[g0], &cfg());
        assert_eq!(labels, vec![AssignmentLabel::Positive(0), AssignmentLabel::Ignore]);
    }

    #[test]
    fn forced_positive_overrides_negative() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let sliver = bx(0.0, 0.0, 10.0, 1.0);
        let labels = assign_anchors(&[sliver], &[g], &cfg());
        assert_eq!(labels, vec![AssignmentLabel::Positive(0)]);
    }

    #[test]
    fn targets_follow_labels() {
        let anchor = BBox::from_center(10.0, 10.0, 4.0, 4.0).unwrap();
        let gt = BBox::from_center(12.0, 10.0, 8.0, 4.0).unwrap();
        let labels = [
            AssignmentLabel::Positive(0),
            AssignmentLabel::Negative,
            AssignmentLabel::Ignore,
        ];
        let targets = build_targets(&labels, &[anchor, anchor, anchor], &[gt], DEFAULT_NEGATIVE_VARIANCE).unwrap();
        match targets[0] {
            Some(TargetDistribution::Dirac(t)) => {
                assert!((t.tx() - 0.5).abs() < 1e-12);
                assert!((t.tw() - 2f64.ln()).abs() < 1e-12);
                assert_eq!((t.ty(), t.th()), (0.0, 0.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            targets[1],
            Some(TargetDistribution::WideGaussian { variance: 1.0 / 3.0 })
        );
        assert_eq!(targets[2], None);

        let same = build_targets(&[AssignmentLabel::Positive(0)], &[gt], &[gt], 1.0 / 3.0).unwrap();
        assert_eq!(same[0], Some(TargetDistribution::Dirac(Offsets::ZERO)));
    }

    #[test]
    fn degenerate_positive_is_an_error() {
        let flat = bx(0.0, 0.0, 10.0, 0.0);
        let anchor = bx(0.0, 0.0, 10.0, 10.0);
        assert!(build_targets(&[AssignmentLabel::Positive(0)], &[anchor], &[flat], 1.0 / 3.0).is_err());
    }

    fn labels(pos: usize, neg: usize, ignore: usize) -> Vec<AssignmentLabel> {
        let mut v = vec![AssignmentLabel::Positive(0); pos];
        v.extend(vec![AssignmentLabel::Negative; neg]);
        v.extend(vec![AssignmentLabel::Ignore; ignore]);
        v
    }

    fn counts(l: &[AssignmentLabel], idx: &[usize]) -> (usize, usize) {
        let p = idx.iter().filter(|&&i| l[i].is_positive()).count();
        let n = idx.iter().filter(|&&i| l[i].is_negative()).count();
        assert_eq!(p + n, idx.len(), "ignore sampled");
        (p, n)
    }

    #[test]
    fn minibatch_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = labels(300, 300, 50);
        assert_eq!(counts(&l, &sample_minibatch(&l, &cfg(), &mut rng)), (128, 128));
        let l = labels(10, 1000, 0);
        assert_eq!(counts(&l, &sample_minibatch(&l, &cfg(), &mut rng)), (10, 246));
        let l = labels(0, 0, 20);
        assert!(sample_minibatch(&l, &cfg(), &mut rng).is_empty());
    }

    #[test]
    fn minibatch_deterministic() {
        let l = labels(300, 900, 40);
        let a = sample_minibatch(&l, &cfg(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_minibatch(&l, &cfg(), &mut ChaCha8Rng::seed_from_u64(3));
        let c = sample_minibatch(&l, &cfg(), &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), a.len());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = AssignmentConfig {
            neg_iou_threshold: 0.8,
            ..cfg()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "assignment.neg_iou_threshold"));
    }
}
