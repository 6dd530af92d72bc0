//! Proposal recall and the offset-error-by-objectness analysis.
//!
//! The analysis follows a fixed protocol per scene: decode every anchor with
//! the head's predicted offsets, keep boxes overlapping some ground truth
//! (IoU > 0), and take the `samples_per_gt x |gt|` highest-scoring ones. Each
//! sampled box contributes one record per coordinate holding the absolute
//! offset between the box and its best-matching ground truth. Records are
//! then bucketed into score deciles over the whole run, and the top and
//! bottom deciles are compared by median with a bootstrap.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_offsets, encode_offsets, generate_anchors, iou, BBox, Coord};
use crate::scoring::{propose_scored, rank_order, Proposal, ProposalConfig};
use crate::training::eval_scenes;
use crate::training::head::ToyHead;
use crate::training::scene::{derive_seed, SyntheticScene};

const BOOTSTRAP_STREAM: u64 = 5;

/// Ground truths recovered by the first `k` proposals at `iou_threshold`.
pub fn recall_counts(proposals: &[Proposal], gts: &[BBox], k: usize, iou_threshold: f64) -> (usize, usize) {
    let top = &proposals[..proposals.len().min(k)];
    let matched = gts
        .iter()
        .filter(|g| top.iter().any(|p| iou(&p.bbox, g) >= iou_threshold))
        .count();
    (matched, gts.len())
}

pub fn scene_proposals(
    head: &ToyHead,
    anchors: &[BBox],
    scene: &SyntheticScene,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let (offsets, scores) = head.scored_offsets(&scene.features, cfg.epsilon)?;
    propose_scored(anchors, &offsets, &scores, scene.image_w, scene.image_h, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: usize,
    pub iou_threshold: f64,
    pub recall: f64,
    pub matched: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallTable {
    pub entries: Vec<RecallEntry>,
}

impl RecallTable {
    pub fn get(&self, k: usize, iou_threshold: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.k == k && e.iou_threshold == iou_threshold)
            .map(|e| e.recall)
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv_string(&self.entries)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Ok(RecallTable {
            entries: from_csv_str(text)?,
        })
    }
}

/// Recall over a scene set for every `(k, iou)` pair. Proposals are produced
/// once per scene with `top_k_post_nms = max(ks)`.
pub fn evaluate_recall(
    head: &ToyHead,
    anchors: &[BBox],
    scenes: &[SyntheticScene],
    cfg: &ProposalConfig,
    ks: &[usize],
    ious: &[f64],
) -> Result<RecallTable> {
    let cfg = ProposalConfig {
        top_k_post_nms: ks.iter().copied().max().unwrap_or(cfg.top_k_post_nms),
        ..cfg.clone()
    };
    let mut counts = vec![(0usize, 0usize); ks.len() * ious.len()];
    for scene in scenes {
        let proposals = scene_proposals(head, anchors, scene, &cfg)?;
        for (a, &k) in ks.iter().enumerate() {
            for (b, &t) in ious.iter().enumerate() {
                let (m, n) = recall_counts(&proposals, &scene.gt_boxes, k, t);
                let slot = &mut counts[a * ious.len() + b];
                slot.0 += m;
                slot.1 += n;
            }
        }
    }
    let mut entries = Vec::new();
    for (a, &k) in ks.iter().enumerate() {
        for (b, &t) in ious.iter().enumerate() {
            let (matched, total) = counts[a * ious.len() + b];
            entries.push(RecallEntry {
                k,
                iou_threshold: t,
                recall: if total == 0 { 1.0 } else { matched as f64 / total as f64 },
                matched,
                total,
            });
        }
    }
    Ok(RecallTable { entries })
}

/// One coordinate of one sampled proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetScoreRecord {
    pub scene: usize,
    pub anchor_index: usize,
    pub coordinate: Coord,
    pub score: f64,
    /// `|t_c|` where `t` encodes the best-matching ground truth relative to the proposal.
    pub abs_offset: f64,
    /// 1 (lowest scores) to 10 (highest scores).
    pub decile: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetAnalysis {
    pub records: Vec<OffsetScoreRecord>,
    pub sampled_proposals: usize,
    /// Scenes with no proposal overlapping a ground truth.
    pub skipped_scenes: usize,
}

/// Samples proposals per scene by descending score among those overlapping a
/// ground truth and records their per-coordinate offset errors.
pub fn sample_offset_records(
    head: &ToyHead,
    anchors: &[BBox],
    scenes: &[SyntheticScene],
    samples_per_gt: usize,
    cfg: &ProposalConfig,
) -> Result<OffsetAnalysis> {
    struct Sampled {
        scene: usize,
        proposal: Proposal,
        errors: [f64; 4],
    }
    let mut sampled = Vec::new();
    let mut skipped = 0;

    for (s, scene) in scenes.iter().enumerate() {
        let (offsets, scores) = head.scored_offsets(&scene.features, cfg.epsilon)?;
        let mut eligible: Vec<(Proposal, usize)> = Vec::new();
        for (i, anchor) in anchors.iter().enumerate() {
            let bbox = clip_box(&decode_offsets(anchor, &offsets[i]), scene.image_w, scene.image_h);
            if !bbox.has_min_size(cfg.min_box_size) || !scores[i].is_finite() {
                continue;
            }
            let best = best_match(&bbox, &scene.gt_boxes);
            if let Some((gt, _)) = best {
                eligible.push((
                    Proposal {
                        bbox,
                        score: scores[i],
                        anchor_index: i,
                    },
                    gt,
                ));
            }
        }
        if eligible.is_empty() {
            skipped += 1;
            continue;
        }
        eligible.sort_by(|a, b| rank_order(&a.0, &b.0));
        eligible.truncate(samples_per_gt * scene.gt_boxes.len());
        for (proposal, gt) in eligible {
            let t = encode_offsets(&proposal.bbox, &scene.gt_boxes[gt])?;
            sampled.push(Sampled {
                scene: s,
                proposal,
                errors: t.0.map(f64::abs),
            });
        }
    }

    // deciles over the whole run, highest scores in decile 10
    let mut order: Vec<usize> = (0..sampled.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&sampled[a], &sampled[b]);
        pb.proposal
            .score
            .total_cmp(&pa.proposal.score)
            .then(pa.scene.cmp(&pb.scene))
            .then(pa.proposal.anchor_index.cmp(&pb.proposal.anchor_index))
    });
    let n = sampled.len();
    let mut decile = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        decile[i] = 10 - (rank * 10 / n) as u8;
    }

    let mut records = Vec::with_capacity(4 * n);
    for &i in &order {
        let p = &sampled[i];
        for c in Coord::ALL {
            records.push(OffsetScoreRecord {
                scene: p.scene,
                anchor_index: p.proposal.anchor_index,
                coordinate: c,
                score: p.proposal.score,
                abs_offset: p.errors[c.index()],
                decile: decile[i],
            });
        }
    }
    Ok(OffsetAnalysis {
        records,
        sampled_proposals: n,
        skipped_scenes: skipped,
    })
}

/// Highest-IoU ground truth (lowest index on ties) when the overlap is positive.
fn best_match(bbox: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = iou(bbox, g);
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best
}

/// Top-versus-bottom decile comparison for one head and coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileSummary {
    pub head: String,
    pub coordinate: Coord,
    pub n_top: usize,
    pub n_bottom: usize,
    pub median_top: f64,
    pub median_bottom: f64,
    pub ci_top_lo: f64,
    pub ci_top_hi: f64,
    pub ci_bottom_lo: f64,
    pub ci_bottom_hi: f64,
    /// Bootstrap estimate of `P(median_top >= median_bottom)`.
    pub p_value: f64,
}

impl DecileSummary {
    /// Top-decile median below bottom-decile median at the given level.
    pub fn separated(&self, alpha: f64) -> bool {
        self.median_top < self.median_bottom && self.p_value < alpha
    }

    /// The two 95% bootstrap intervals intersect.
    pub fn ci_overlap(&self) -> bool {
        self.ci_top_lo <= self.ci_bottom_hi && self.ci_bottom_lo <= self.ci_top_hi
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    // linear interpolation between order statistics
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn bootstrap_medians<R: Rng>(sample: &[f64], resamples: usize, rng: &mut R) -> Vec<f64> {
    let mut buf = vec![0.0; sample.len()];
    (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = sample[rng.random_range(0..sample.len())];
            }
            buf.sort_by(f64::total_cmp);
            median_sorted(&buf)
        })
        .collect()
}

/// Per-coordinate summaries of top (decile 10) versus bottom (decile 1)
/// records, with percentile bootstrap intervals.
pub fn summarize_deciles(
    head: &str,
    records: &[OffsetScoreRecord],
    resamples: usize,
    seed: u64,
) -> Result<Vec<DecileSummary>> {
    if resamples == 0 {
        return Err(Error::Domain("bootstrap needs at least one resample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4);
    for c in Coord::ALL {
        let pick = |d: u8| -> Vec<f64> {
            records
                .iter()
                .filter(|r| r.coordinate == c && r.decile == d)
                .map(|r| r.abs_offset)
                .collect()
        };
        let (top, bottom) = (pick(10), pick(1));
        if top.is_empty() || bottom.is_empty() {
            return Err(Error::Domain(format!(
                "coordinate {}: need records in both the top and bottom deciles",
                c.name()
            )));
        }
        let mut bt = bootstrap_medians(&top, resamples, &mut rng);
        let mut bb = bootstrap_medians(&bottom, resamples, &mut rng);
        let not_below = bt.iter().zip(&bb).filter(|(t, b)| t >= b).count();
        bt.sort_by(f64::total_cmp);
        bb.sort_by(f64::total_cmp);
        out.push(DecileSummary {
            head: head.to_string(),
            coordinate: c,
            n_top: top.len(),
            n_bottom: bottom.len(),
            median_top: median(&top),
            median_bottom: median(&bottom),
            ci_top_lo: quantile_sorted(&bt, 0.025),
            ci_top_hi: quantile_sorted(&bt, 0.975),
            ci_bottom_lo: quantile_sorted(&bb, 0.025),
            ci_bottom_hi: quantile_sorted(&bb, 0.975),
            p_value: (not_below + 1) as f64 / (resamples + 1) as f64,
        });
    }
    Ok(out)
}

/// Offset analysis for a KL-RPN head and a baseline head on the held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetReport {
    pub kl: OffsetAnalysis,
    pub baseline: OffsetAnalysis,
    /// KL-RPN rows first, then baseline, each in coordinate order.
    pub summary: Vec<DecileSummary>,
}

pub fn analyze_offsets(kl_head: &ToyHead, baseline_head: &ToyHead, cfg: &RunConfig) -> Result<OffsetReport> {
    let anchors = generate_anchors(&cfg.grid);
    let scenes = eval_scenes(cfg, &anchors);
    let mut summary = Vec::with_capacity(8);
    let mut run = |head: &ToyHead, stream: u64| -> Result<OffsetAnalysis> {
        let analysis = sample_offset_records(head, &anchors, &scenes, cfg.eval.samples_per_gt, &cfg.proposal)?;
        summary.extend(summarize_deciles(
            head.variant.name(),
            &analysis.records,
            cfg.eval.bootstrap_resamples,
            derive_seed(cfg.eval.seed, BOOTSTRAP_STREAM, stream),
        )?);
        Ok(analysis)
    };
    let kl = run(kl_head, 0)?;
    let baseline = run(baseline_head, 1)?;
    Ok(OffsetReport { kl, baseline, summary })
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Domain(format!("csv write: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Domain(format!("csv write: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Domain(format!("csv write: {e}")))
}

pub fn from_csv_str<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Domain(format!("csv read: {e}")))
}

pub fn read_csv_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
