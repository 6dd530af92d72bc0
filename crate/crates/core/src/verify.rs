//! Numerical oracles and the checks behind the `grad-check` and `selftest`
//! commands.
//!
//! Each oracle avoids the code it checks: gradients against central
//! differences, the closed-form KL against Simpson quadrature of the
//! log-density ratio, greedy NMS against the subset characterization of its
//! output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{assign_anchors, AssignmentConfig, AssignmentLabel, TargetDistribution};
use crate::error::Result;
use crate::geometry::{
    decode_offsets, encode_offsets, generate_anchors, iou, pairwise_iou, AnchorGridConfig, BBox, Offsets,
};
use crate::kl_losses::{
    gaussian_kl, grad_loss_neg, grad_loss_pos, loss_neg, loss_pos, neg_stationary_beta, GaussianPrediction, LossConfig,
    LossGradients,
};
use crate::scoring::{nms, rank_order, Proposal};
use crate::training::head::{backward, HeadVariant, ToyHead};
use crate::training::scene::{gen_scene, FeatureMatrix, SceneConfig};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor in [`relative_error`], so gradients near zero are
/// compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// `KL(N(mu1, s1sq) || N(mu2, s2sq))` by composite Simpson's rule over
/// `mu1 +- 12 sigma1`.
pub fn quadrature_kl(mu1: f64, s1sq: f64, mu2: f64, s2sq: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let s1 = s1sq.sqrt();
    let (a, b) = (mu1 - 12.0 * s1, mu1 + 12.0 * s1);
    let h = (b - a) / n as f64;
    let log_norm =
        |x: f64, m: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m) * (x - m) / (2.0 * v);
    let integrand = |x: f64| {
        let lp = log_norm(x, mu1, s1sq);
        lp.exp() * (lp - log_norm(x, mu2, s2sq))
    };
    let mut sum = integrand(a) + integrand(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * integrand(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Greedy-NMS reference by exhaustive search: the output is the unique
/// subset that is pairwise separated and suppresses every excluded box with
/// a better-ranked member. Exponential; meant for at most ~12 boxes.
pub fn nms_exhaustive(proposals: &[Proposal], iou_threshold: f64, top_k: usize) -> Vec<Proposal> {
    let n = proposals.len();
    assert!(n <= 16, "exhaustive NMS is exponential");
    let mut ranked = proposals.to_vec();
    ranked.sort_by(rank_order);
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let ok = (0..n).all(|i| {
            if member(i) {
                (0..i).all(|j| !member(j) || iou(&ranked[j].bbox, &ranked[i].bbox) <= iou_threshold)
            } else {
                (0..i).any(|j| member(j) && iou(&ranked[j].bbox, &ranked[i].bbox) > iou_threshold)
            }
        });
        if ok {
            return (0..n).filter(|&i| member(i)).map(|i| ranked[i]).take(top_k).collect();
        }
    }
    unreachable!("greedy suppression always has a consistent subset")
}

/// Checks `output` against the characterization used by
/// [`nms_exhaustive`] without enumerating subsets. Valid for any size when
/// `top_k` did not truncate.
pub fn nms_output_consistent(input: &[Proposal], output: &[Proposal], iou_threshold: f64) -> bool {
    let mut ranked = input.to_vec();
    ranked.sort_by(rank_order);
    let kept = |p: &Proposal| {
        output
            .iter()
            .any(|o| o.anchor_index == p.anchor_index && o.bbox == p.bbox)
    };
    for (i, p) in ranked.iter().enumerate() {
        let suppressed = ranked[..i]
            .iter()
            .any(|q| kept(q) && iou(&q.bbox, &p.bbox) > iou_threshold);
        if kept(p) == suppressed {
            return false;
        }
    }
    output.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt())
}

/// One line of a check report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < self.tolerance
    }

    fn boolean(name: &str, failures: usize, cases: usize) -> Self {
        CheckResult {
            name: name.to_string(),
            max_error: failures as f64,
            tolerance: 0.5,
            cases,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} max_err={:.3e} tol={:.1e} cases={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.cases
        )
    }
}

pub type LossGradFn<'a> = &'a dyn Fn(&Offsets, &GaussianPrediction, &LossConfig) -> LossGradients;
pub type LossFn<'a> = &'a dyn Fn(&Offsets, &GaussianPrediction, &LossConfig) -> f64;

fn random_prediction<R: Rng>(rng: &mut R) -> GaussianPrediction {
    let mut p = GaussianPrediction::default();
    for c in 0..4 {
        p.mu[c] = rng.random_range(-2.0..2.0);
        p.beta[c] = rng.random_range(-3.0..3.0);
    }
    p
}

/// Largest relative error between `grad` and central differences of `loss`
/// over `cases` random `(target, prediction)` pairs, all eight partials each.
pub fn check_loss_gradient(
    name: &str,
    loss: LossFn,
    grad: LossGradFn,
    cases: usize,
    seed: u64,
    tolerance: f64,
) -> CheckResult {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let target = Offsets(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        let pred = random_prediction(&mut rng);
        let g = grad(&target, &pred, &cfg);
        for c in 0..4 {
            let num_mu = central_difference(
                |v| {
                    let mut q = pred;
                    q.mu[c] = v;
                    loss(&target, &q, &cfg)
                },
                pred.mu[c],
                FD_STEP,
            );
            let num_beta = central_difference(
                |v| {
                    let mut q = pred;
                    q.beta[c] = v;
                    loss(&target, &q, &cfg)
                },
                pred.beta[c],
                FD_STEP,
            );
            worst = worst
                .max(relative_error(g.d_mu[c], num_mu))
                .max(relative_error(g.d_beta[c], num_beta));
        }
    }
    CheckResult {
        name: name.to_string(),
        max_error: worst,
        tolerance,
        cases,
    }
}

pub fn check_pos_gradient(cases: usize, seed: u64) -> CheckResult {
    check_loss_gradient(
        "grad_loss_pos vs finite differences",
        &|t, p, c| loss_pos(t, p, c),
        &|t, p, c| grad_loss_pos(t, p, c),
        cases,
        seed,
        1e-5,
    )
}

pub fn check_neg_gradient(cases: usize, seed: u64) -> CheckResult {
    check_loss_gradient(
        "grad_loss_neg vs finite differences",
        &|_, p, c| loss_neg(p, c),
        &|_, p, c| grad_loss_neg(p, c),
        cases,
        seed,
        1e-5,
    )
}

/// Full-parameter finite-difference check of [`backward`] on a small random
/// instance.
pub fn check_head_gradient(variant: HeadVariant, feature_dim: usize, anchors: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let data = (0..anchors * feature_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let features = FeatureMatrix::new(feature_dim, data)?;
    let head = ToyHead::random_normal(variant, feature_dim, 0.3, &mut rng);
    let batch: Vec<(usize, TargetDistribution)> = (0..anchors)
        .map(|i| {
            let t = if rng.random_bool(0.5) {
                TargetDistribution::Dirac(Offsets(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            } else {
                TargetDistribution::WideGaussian {
                    variance: cfg.sigma1_sq,
                }
            };
            (i, t)
        })
        .collect();

    let (_, grads) = backward(&head, &features, &batch, &cfg)?;
    let mut worst = 0.0f64;
    let mut probe = head.clone();
    for (k, &analytic) in grads.iter().enumerate() {
        let x0 = head.params[k];
        let mut eval = |v: f64| {
            probe.params[k] = v;
            backward(&probe, &features, &batch, &cfg)
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        };
        let num = central_difference(&mut eval, x0, FD_STEP);
        probe.params[k] = x0;
        worst = worst.max(relative_error(analytic, num));
    }
    Ok(CheckResult {
        name: format!("{} head backward vs finite differences", variant.name()),
        max_error: worst,
        tolerance: 1e-4,
        cases: head.param_count(),
    })
}

/// Closed-form KL against quadrature on random parameter sets.
pub fn check_kl_quadrature(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mu1 = rng.random_range(-3.0..3.0);
        let mu2 = rng.random_range(-3.0..3.0);
        let s1 = rng.random_range(0.1f64..3.0).powi(2);
        let s2 = rng.random_range(0.1f64..3.0).powi(2);
        let exact = gaussian_kl(mu1, s1, mu2, s2)?;
        worst = worst.max((exact - quadrature_kl(mu1, s1, mu2, s2, 8000)).abs());
    }
    Ok(CheckResult {
        name: "gaussian_kl vs quadrature".into(),
        max_error: worst,
        tolerance: 1e-6,
        cases,
    })
}

pub fn grad_check() -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_pos_gradient(1000, 11),
        check_neg_gradient(1000, 12),
        check_head_gradient(HeadVariant::KlRpn, 8, 32, 13)?,
        check_head_gradient(HeadVariant::BaselineRpn, 8, 32, 14)?,
        check_kl_quadrature(1000, 15)?,
    ])
}

fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    random_box_sized(rng, extent, 1.0)
}

fn random_box_sized<R: Rng>(rng: &mut R, extent: f64, min_side: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent);
    let y1 = rng.random_range(0.0..extent);
    let w = rng.random_range(min_side..extent / 2.0);
    let h = rng.random_range(min_side..extent / 2.0);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive size")
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// NMS against the exhaustive reference: every score ordering of 4 boxes
/// over many geometries, then random instances of up to 8 boxes.
pub fn check_nms_exhaustive(geometries: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = permutations(4);
    let (mut failures, mut cases) = (0, 0);
    for _ in 0..geometries {
        let boxes: Vec<BBox> = (0..4).map(|_| random_box(&mut rng, 30.0)).collect();
        let thr = rng.random_range(0.1..0.9);
        for perm in &perms {
            let props: Vec<Proposal> = boxes
                .iter()
                .zip(perm)
                .enumerate()
                .map(|(i, (&bbox, &r))| Proposal {
                    bbox,
                    score: r as f64,
                    anchor_index: i,
                })
                .collect();
            cases += 1;
            if nms(&props, thr, usize::MAX) != nms_exhaustive(&props, thr, usize::MAX) {
                failures += 1;
            }
        }
        let n = rng.random_range(0..=8);
        let props: Vec<Proposal> = (0..n)
            .map(|i| Proposal {
                bbox: random_box(&mut rng, 30.0),
                score: rng.random_range(0.0..1.0),
                anchor_index: i,
            })
            .collect();
        let k = rng.random_range(1..=9);
        cases += 1;
        if nms(&props, thr, k) != nms_exhaustive(&props, thr, k) {
            failures += 1;
        }
    }
    CheckResult::boolean("nms vs exhaustive reference", failures, cases)
}

/// Round trips over box pairs whose side ratios stay inside the decode clamp.
pub fn check_round_trip(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let a = random_box_sized(&mut rng, 200.0, 2.0);
        let g = random_box_sized(&mut rng, 200.0, 2.0);
        let Ok(t) = encode_offsets(&a, &g) else {
            return CheckResult::boolean("encode/decode round trip", 1, cases);
        };
        let back = decode_offsets(&a, &t);
        worst = worst
            .max((back.x1 - g.x1).abs())
            .max((back.y1 - g.y1).abs())
            .max((back.x2 - g.x2).abs())
            .max((back.y2 - g.y2).abs());
    }
    CheckResult {
        name: "encode/decode round trip".into(),
        max_error: worst,
        tolerance: 1e-9,
        cases,
    }
}

/// Violations of the labeling rules for one scene, as messages.
pub fn assignment_violations(
    anchors: &[BBox],
    gts: &[BBox],
    labels: &[AssignmentLabel],
    cfg: &AssignmentConfig,
) -> Vec<String> {
    let mut out = Vec::new();
    if labels.len() != anchors.len() {
        out.push(format!("{} labels for {} anchors", labels.len(), anchors.len()));
        return out;
    }
    let m = pairwise_iou(anchors, gts);
    for (i, label) in labels.iter().enumerate() {
        let best = m.row(i).iter().copied().fold(0.0, f64::max);
        match *label {
            AssignmentLabel::Positive(j) => {
                if j >= gts.len() {
                    out.push(format!("anchor {i}: positive for missing gt {j}"));
                    continue;
                }
                let forced = m.get(i, j) > 0.0 && (0..anchors.len()).all(|k| m.get(k, j) <= m.get(i, j));
                if m.get(i, j) < cfg.pos_iou_threshold && !forced {
                    out.push(format!(
                        "anchor {i}: positive at IoU {} without being a best match",
                        m.get(i, j)
                    ));
                }
            }
            AssignmentLabel::Negative => {
                if best >= cfg.neg_iou_threshold {
                    out.push(format!("anchor {i}: negative at IoU {best}"));
                }
            }
            AssignmentLabel::Ignore => {
                if best >= cfg.pos_iou_threshold || best < cfg.neg_iou_threshold {
                    out.push(format!("anchor {i}: ignored at IoU {best}"));
                }
            }
        }
    }
    for j in 0..gts.len() {
        let best = (0..anchors.len()).map(|i| m.get(i, j)).fold(0.0, f64::max);
        // a best-matching anchor must be positive, for this gt or another
        let covered = (0..anchors.len()).any(|i| labels[i].is_positive() && m.get(i, j) == best);
        if best > 0.0 && !covered {
            out.push(format!("gt {j}: overlapped but no positive anchor"));
        }
    }
    out
}

pub fn check_assignment(scenes: usize, seed: u64) -> CheckResult {
    let grid = AnchorGridConfig::default();
    let anchors = generate_anchors(&grid);
    let cfg = AssignmentConfig::default();
    let mut failures = 0;
    for s in 0..scenes {
        let scene = gen_scene(seed.wrapping_add(s as u64), &grid, &SceneConfig::default());
        let labels = assign_anchors(&anchors, &scene.gt_boxes, &cfg);
        if !assignment_violations(&anchors, &scene.gt_boxes, &labels, &cfg).is_empty() {
            failures += 1;
        }
    }
    CheckResult::boolean("assignment invariants", failures, scenes)
}

/// Stationary points of both losses: the `d_beta` of `L_neg` vanishes at
/// `ln(gamma mu^2 + sigma1^2)`, `d_mu` of `L_pos` vanishes at the target,
/// and `mu = 0` recovers variance `sigma1^2`.
pub fn check_stationary(cases: usize, seed: u64) -> CheckResult {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mu: f64 = rng.random_range(-3.0..3.0);
        let beta = neg_stationary_beta(mu, &cfg);
        let g = grad_loss_neg(&GaussianPrediction::new([mu; 4], [beta; 4]), &cfg);
        worst = worst.max(g.d_beta.iter().fold(0.0, |a, d| a.max(d.abs())));

        let t = Offsets(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        let b: f64 = rng.random_range(-3.0..3.0);
        let g = grad_loss_pos(&t, &GaussianPrediction::new(t.0, [b; 4]), &cfg);
        worst = worst.max(g.d_mu.iter().fold(0.0, |a, d| a.max(d.abs())));
    }
    worst = worst.max((neg_stationary_beta(0.0, &cfg).exp() - cfg.sigma1_sq).abs());
    CheckResult {
        name: "loss stationary points".into(),
        max_error: worst,
        tolerance: 1e-9,
        cases,
    }
}

pub fn selftest() -> Vec<CheckResult> {
    vec![
        check_nms_exhaustive(200, 21),
        check_round_trip(1000, 22),
        check_assignment(200, 23),
        check_stationary(100, 24),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_matches_closed_form_sample() {
        let exact = gaussian_kl(0.3, 0.5, -1.0, 2.0).unwrap();
        assert!((exact - quadrature_kl(0.3, 0.5, -1.0, 2.0, 8000)).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn grad_check_passes() {
        let report = grad_check().unwrap();
        for r in &report {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn sign_flipped_neg_gradient_fails() {
        let flipped = |_: &Offsets, p: &GaussianPrediction, c: &LossConfig| {
            let mut g = grad_loss_neg(p, c);
            g.d_mu.iter_mut().for_each(|d| *d = -*d);
            g
        };
        let r = check_loss_gradient("flipped", &|_, p, c| loss_neg(p, c), &flipped, 50, 3, 1e-5);
        assert!(!r.passed(), "{r}");
    }

    #[test]
    fn selftest_passes() {
        for r in selftest() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn exhaustive_nms_detects_wrong_output() {
        let a = Proposal {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            score: 2.0,
            anchor_index: 0,
        };
        let b = Proposal {
            bbox: BBox::new(1.0, 0.0, 11.0, 10.0).unwrap(),
            score: 1.0,
            anchor_index: 1,
        };
        assert_eq!(nms_exhaustive(&[a, b], 0.5, 10), vec![a]);
        assert!(nms_output_consistent(&[a, b], &[a], 0.5));
        assert!(!nms_output_consistent(&[a, b], &[a, b], 0.5));
        assert!(!nms_output_consistent(&[a, b], &[b], 0.5));
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(4).len(), 24);
    }
}
