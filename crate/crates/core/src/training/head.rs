//! Affine per-anchor heads.
//!
//! The KL-RPN head maps a feature vector to `(mu_x, mu_y, mu_w, mu_h,
//! beta_x, beta_y, beta_w, beta_h)`. The baseline head maps it to
//! `(logit, tx, ty, tw, th)` and is trained with binary cross-entropy on
//! the logit plus smooth-L1 on positive offsets, the two losses touching
//! disjoint outputs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assignment::TargetDistribution;
use crate::error::{Error, Result};
use crate::geometry::Offsets;
use crate::kl_losses::{grad_loss_kl, loss_kl, GaussianPrediction, LossConfig};
use crate::scoring::objectness;
use crate::training::scene::{FeatureMatrix, FOREGROUND_CHANNEL, OFFSET_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    KlRpn,
    BaselineRpn,
}

impl HeadVariant {
    pub fn output_dim(self) -> usize {
        match self {
            HeadVariant::KlRpn => 8,
            HeadVariant::BaselineRpn => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::KlRpn => "kl_rpn",
            HeadVariant::BaselineRpn => "baseline_rpn",
        }
    }
}

/// Baseline output for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselinePrediction {
    pub logit: f64,
    pub offsets: Offsets,
}

/// Affine head. `params` holds the `feature_dim x output_dim` weight matrix
/// row-major (one row per input feature) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyHead {
    pub variant: HeadVariant,
    pub feature_dim: usize,
    pub params: Vec<f64>,
}

impl ToyHead {
    pub fn zeros(variant: HeadVariant, feature_dim: usize) -> Self {
        ToyHead {
            variant,
            feature_dim,
            params: vec![0.0; (feature_dim + 1) * variant.output_dim()],
        }
    }

    /// Every parameter drawn from `N(0, std^2)`.
    pub fn random_normal<R: Rng + ?Sized>(variant: HeadVariant, feature_dim: usize, std: f64, rng: &mut R) -> Self {
        let mut head = ToyHead::zeros(variant, feature_dim);
        for p in &mut head.params {
            let z: f64 = rng.sample(StandardNormal);
            *p = z * std;
        }
        head
    }

    /// Hand-set KL-RPN head for the engineered features: means copy the
    /// offset channels, and the log-variance drops to `fg_beta` on
    /// foreground anchors and sits at `ln(1/3)` elsewhere.
    pub fn oracle(feature_dim: usize, fg_beta: f64) -> Self {
        let mut head = ToyHead::zeros(HeadVariant::KlRpn, feature_dim);
        let bg_beta = (1.0f64 / 3.0).ln();
        for c in OFFSET_CHANNELS {
            *head.weight_mut(c, c) = 1.0;
            *head.weight_mut(FOREGROUND_CHANNEL, 4 + c) = fg_beta - bg_beta;
            *head.bias_mut(4 + c) = bg_beta;
        }
        head
    }

    pub fn output_dim(&self) -> usize {
        self.variant.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn weight(&self, feature: usize, output: usize) -> f64 {
        self.params[feature * self.output_dim() + output]
    }

    pub fn weight_mut(&mut self, feature: usize, output: usize) -> &mut f64 {
        let o = self.output_dim();
        &mut self.params[feature * o + output]
    }

    pub fn bias(&self, output: usize) -> f64 {
        self.params[self.feature_dim * self.output_dim() + output]
    }

    pub fn bias_mut(&mut self, output: usize) -> &mut f64 {
        let i = self.feature_dim * self.output_dim() + output;
        &mut self.params[i]
    }

    pub fn check(&self) -> Result<()> {
        let expected = (self.feature_dim + 1) * self.output_dim();
        if self.params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.params.len(),
            });
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("head parameters"));
        }
        Ok(())
    }

    /// Raw affine output for one feature vector.
    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        let o = self.output_dim();
        out[..o].copy_from_slice(&self.params[self.feature_dim * o..]);
        for (f, &xf) in x.iter().enumerate() {
            let row = &self.params[f * o..(f + 1) * o];
            for (acc, w) in out[..o].iter_mut().zip(row) {
                *acc += w * xf;
            }
        }
        Ok(())
    }

    pub fn forward(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(features.rows());
        for i in 0..features.rows() {
            let mut y = vec![0.0; self.output_dim()];
            self.forward_row(features.row(i), &mut y)?;
            out.push(y);
        }
        Ok(out)
    }

    fn require(&self, variant: HeadVariant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::Domain(format!(
                "expected a {} head, got {}",
                variant.name(),
                self.variant.name()
            )));
        }
        Ok(())
    }

    pub fn predict_gaussian(&self, features: &FeatureMatrix) -> Result<Vec<GaussianPrediction>> {
        self.require(HeadVariant::KlRpn)?;
        let mut y = [0.0; 8];
        (0..features.rows())
            .map(|i| {
                self.forward_row(features.row(i), &mut y)?;
                Ok(split_gaussian(&y))
            })
            .collect()
    }

    pub fn predict_baseline(&self, features: &FeatureMatrix) -> Result<Vec<BaselinePrediction>> {
        self.require(HeadVariant::BaselineRpn)?;
        let mut y = [0.0; 5];
        (0..features.rows())
            .map(|i| {
                self.forward_row(features.row(i), &mut y)?;
                Ok(BaselinePrediction {
                    logit: y[0],
                    offsets: Offsets([y[1], y[2], y[3], y[4]]),
                })
            })
            .collect()
    }

    /// Regression offsets and proposal score per anchor: objectness for
    /// KL-RPN, sigmoid of the logit for the baseline.
    pub fn scored_offsets(&self, features: &FeatureMatrix, epsilon: f64) -> Result<(Vec<Offsets>, Vec<f64>)> {
        match self.variant {
            HeadVariant::KlRpn => {
                let preds = self.predict_gaussian(features)?;
                Ok(preds.iter().map(|p| (p.mean_offsets(), objectness(p, epsilon))).unzip())
            }
            HeadVariant::BaselineRpn => {
                let preds = self.predict_baseline(features)?;
                Ok(preds.iter().map(|p| (p.offsets, sigmoid(p.logit))).unzip())
            }
        }
    }
}

fn split_gaussian(y: &[f64]) -> GaussianPrediction {
    GaussianPrediction::new([y[0], y[1], y[2], y[3]], [y[4], y[5], y[6], y[7]])
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln sigmoid(z) + (1 - y) ln(1 - sigmoid(z))]`, stable for large `|z|`.
pub fn binary_cross_entropy_with_logit(z: f64, positive: bool) -> f64 {
    let y = if positive { 1.0 } else { 0.0 };
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Smooth-L1 with transition at 1: quadratic inside, linear outside.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Mean loss over a sampled batch of `(anchor index, target)` pairs and its
/// exact gradient with respect to `head.params`. An empty batch yields zero
/// loss and zero gradient.
///
/// KL-RPN: mean of the KL loss per anchor. Baseline: mean binary
/// cross-entropy (Dirac targets are foreground) plus smooth-L1 on the offsets
/// of Dirac targets, both divided by the batch size.
pub fn backward(
    head: &ToyHead,
    features: &FeatureMatrix,
    batch: &[(usize, TargetDistribution)],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; head.param_count()];
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    if features.dim() != head.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: head.feature_dim,
            got: features.dim(),
        });
    }
    let o = head.output_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut y = vec![0.0; o];
    let mut dy = vec![0.0; o];
    let mut loss = 0.0;

    for (anchor, target) in batch {
        let x = features.row(*anchor);
        head.forward_row(x, &mut y)?;
        match head.variant {
            HeadVariant::KlRpn => {
                let pred = split_gaussian(&y);
                loss += loss_kl(target, &pred, cfg);
                let g = grad_loss_kl(target, &pred, cfg);
                dy[..4].copy_from_slice(&g.d_mu);
                dy[4..].copy_from_slice(&g.d_beta);
            }
            HeadVariant::BaselineRpn => {
                let positive = matches!(target, TargetDistribution::Dirac(_));
                loss += binary_cross_entropy_with_logit(y[0], positive);
                dy[0] = sigmoid(y[0]) - if positive { 1.0 } else { 0.0 };
                match target {
                    TargetDistribution::Dirac(t) => {
                        for c in 0..4 {
                            let d = y[1 + c] - t.0[c];
                            loss += smooth_l1(d);
                            dy[1 + c] = smooth_l1_grad(d);
                        }
                    }
                    TargetDistribution::WideGaussian { .. } => dy[1..].fill(0.0),
                }
            }
        }
        for (f, &xf) in x.iter().enumerate() {
            for k in 0..o {
                grads[f * o + k] += scale * xf * dy[k];
            }
        }
        for k in 0..o {
            grads[head.feature_dim * o + k] += scale * dy[k];
        }
    }
    Ok((loss * scale, grads))
}
