//! Objectness from predicted standard deviations, proposal decoding, and
//! greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_offsets, iou, BBox, Offsets};
use crate::kl_losses::GaussianPrediction;

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub nms_iou_threshold: f64,
    pub top_k_pre_nms: usize,
    pub top_k_post_nms: usize,
    pub epsilon: f64,
    /// Minimum side length in pixels after clipping.
    pub min_box_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            nms_iou_threshold: 0.7,
            top_k_pre_nms: 6000,
            top_k_post_nms: 1000,
            epsilon: DEFAULT_EPSILON,
            min_box_size: 1.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold <= 1.0) {
            return Err(Error::config("proposal.nms_iou_threshold", "must lie in (0, 1]"));
        }
        if self.top_k_pre_nms == 0 {
            return Err(Error::config("proposal.top_k_pre_nms", "must be positive"));
        }
        if self.top_k_post_nms == 0 {
            return Err(Error::config("proposal.top_k_post_nms", "must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("proposal.epsilon", "must be positive"));
        }
        if !(self.min_box_size >= 0.0) {
            return Err(Error::config("proposal.min_box_size", "must be non-negative"));
        }
        Ok(())
    }
}

/// `1 / (sigma_x * sigma_y * sigma_w * sigma_h + epsilon)` with
/// `sigma = exp(beta / 2)`. Bounded above by `1 / epsilon`.
pub fn objectness(pred: &GaussianPrediction, epsilon: f64) -> f64 {
    let product: f64 = pred.std_devs().iter().product();
    1.0 / (product + epsilon)
}

/// Descending score, then ascending anchor index.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.anchor_index.cmp(&b.anchor_index))
}

/// Greedy NMS: keep the best remaining proposal, drop everything overlapping
/// it by more than `iou_threshold`, repeat. At most `top_k` survivors, in
/// rank order.
pub fn nms(proposals: &[Proposal], iou_threshold: f64, top_k: usize) -> Vec<Proposal> {
    let mut order = proposals.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in order {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= iou_threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Decodes, clips, filters, ranks and suppresses already-scored candidates.
pub fn propose_scored(
    anchors: &[BBox],
    offsets: &[Offsets],
    scores: &[f64],
    image_w: f64,
    image_h: f64,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if offsets.len() != anchors.len() || scores.len() != anchors.len() {
        return Err(Error::DimensionMismatch {
            expected: anchors.len(),
            got: offsets.len().min(scores.len()),
        });
    }
    let mut candidates: Vec<Proposal> = anchors
        .iter()
        .zip(offsets)
        .zip(scores)
        .enumerate()
        .filter_map(|(i, ((a, t), &s))| {
            let bbox = clip_box(&decode_offsets(a, t), image_w, image_h);
            (bbox.has_min_size(cfg.min_box_size) && s.is_finite()).then_some(Proposal {
                bbox,
                score: s,
                anchor_index: i,
            })
        })
        .collect();
    candidates.sort_by(rank_order);
    candidates.truncate(cfg.top_k_pre_nms);
    Ok(nms(&candidates, cfg.nms_iou_threshold, cfg.top_k_post_nms))
}

/// Proposals from Gaussian predictions: decode each anchor with the predicted
/// mean, score by [`objectness`], then rank and suppress.
pub fn propose(
    anchors: &[BBox],
    preds: &[GaussianPrediction],
    image_w: f64,
    image_h: f64,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let offsets: Vec<Offsets> = preds.iter().map(|p| p.mean_offsets()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| objectness(p, cfg.epsilon)).collect();
    propose_scored(anchors, &offsets, &scores, image_w, image_h, cfg)
}
