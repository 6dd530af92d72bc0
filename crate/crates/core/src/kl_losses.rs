//! KL-divergence losses between a predicted Gaussian over box offsets and
//! the target distribution of an anchor.
//!
//! The network predicts, per coordinate, a mean `mu2` and a log-variance
//! `beta = ln(sigma2^2)`. Negative anchors are pulled toward a wide zero-mean
//! Gaussian, positive anchors toward a Dirac delta at the ground-truth
//! offsets. Both losses keep only the terms that carry gradient:
//!
//! ```text
//! L_neg = e^-beta * (gamma * mu2^2 + sigma1^2) / 2 + beta / 2
//! L_pos = e^-beta * gamma * (mu1 - mu2)^2 / 2 + beta / 2
//! ```
//!
//! `gamma` multiplies only the squared mean term in `L_neg`; the `sigma1^2`
//! term (1/3 by default) is left unscaled.
//!
//! Note the two-stage detector weight that multiplies the second-stage losses
//! is also written "beta" in the literature; here it is
//! [`LossConfig::stage2_weight`] and is not used by anything in this crate.

use serde::{Deserialize, Serialize};

use crate::assignment::{TargetDistribution, DEFAULT_NEGATIVE_VARIANCE};
use crate::error::{Error, Result};
use crate::geometry::Offsets;

/// Per-anchor predicted distribution: mean and log-variance for x, y, w, h.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: [f64; 4],
    /// `ln(sigma^2)` per coordinate; unconstrained.
    pub beta: [f64; 4],
}

impl GaussianPrediction {
    pub fn new(mu: [f64; 4], beta: [f64; 4]) -> Self {
        GaussianPrediction { mu, beta }
    }

    pub fn mean_offsets(&self) -> Offsets {
        Offsets(self.mu)
    }

    /// `sigma = exp(beta / 2)` per coordinate.
    pub fn std_devs(&self) -> [f64; 4] {
        self.beta.map(|b| (0.5 * b).exp())
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.beta).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossGradients {
    pub d_mu: [f64; 4],
    pub d_beta: [f64; 4],
}

impl LossGradients {
    pub fn is_finite(&self) -> bool {
        self.d_mu.iter().chain(&self.d_beta).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    /// Variance of the negative target per coordinate.
    pub sigma1_sq: f64,
    /// Weight of second-stage classification/regression losses in a full
    /// two-stage detector. Recorded only.
    pub stage2_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.5,
            sigma1_sq: DEFAULT_NEGATIVE_VARIANCE,
            stage2_weight: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("loss.gamma", "must be positive"));
        }
        if !(self.sigma1_sq > 0.0 && self.sigma1_sq.is_finite()) {
            return Err(Error::config("loss.sigma1_sq", "must be positive"));
        }
        Ok(())
    }
}

/// `KL(N(mu1, sigma1_sq) || N(mu2, sigma2_sq))` in closed form.
pub fn gaussian_kl(mu1: f64, sigma1_sq: f64, mu2: f64, sigma2_sq: f64) -> Result<f64> {
    if !(sigma1_sq > 0.0 && sigma2_sq > 0.0) {
        return Err(Error::Domain(format!(
            "variances must be positive (got {sigma1_sq}, {sigma2_sq})"
        )));
    }
    let d = mu1 - mu2;
    Ok((sigma1_sq + d * d) / (2.0 * sigma2_sq) + 0.5 * (sigma2_sq / sigma1_sq).ln() - 0.5)
}

fn neg_term(mu2: f64, beta: f64, gamma: f64, sigma1_sq: f64) -> f64 {
    (-beta).exp() * (gamma * mu2 * mu2 + sigma1_sq) * 0.5 + 0.5 * beta
}

fn pos_term(mu1: f64, mu2: f64, beta: f64, gamma: f64) -> f64 {
    let d = mu1 - mu2;
    (-beta).exp() * gamma * d * d * 0.5 + 0.5 * beta
}

/// Loss against the wide negative target, summed over the four coordinates.
pub fn loss_neg(pred: &GaussianPrediction, cfg: &LossConfig) -> f64 {
    (0..4)
        .map(|c| neg_term(pred.mu[c], pred.beta[c], cfg.gamma, cfg.sigma1_sq))
        .sum()
}

/// Loss against a Dirac target at `target`, summed over the four coordinates.
pub fn loss_pos(target: &Offsets, pred: &GaussianPrediction, cfg: &LossConfig) -> f64 {
    (0..4)
        .map(|c| pos_term(target.0[c], pred.mu[c], pred.beta[c], cfg.gamma))
        .sum()
}

/// Dispatches on the target kind. A wide-Gaussian target uses its own
/// variance in place of `cfg.sigma1_sq`.
pub fn loss_kl(target: &TargetDistribution, pred: &GaussianPrediction, cfg: &LossConfig) -> f64 {
    match target {
        TargetDistribution::Dirac(mu1) => loss_pos(mu1, pred, cfg),
        TargetDistribution::WideGaussian { variance } => (0..4)
            .map(|c| neg_term(pred.mu[c], pred.beta[c], cfg.gamma, *variance))
            .sum(),
    }
}

/// Mean of [`loss_kl`] over a batch; zero for an empty batch.
pub fn mean_loss_kl<'a, I>(batch: I, cfg: &LossConfig) -> f64
where
    I: IntoIterator<Item = (&'a TargetDistribution, &'a GaussianPrediction)>,
{
    let (sum, n) = batch
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (t, p)| (s + loss_kl(t, p, cfg), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn grad_loss_pos(target: &Offsets, pred: &GaussianPrediction, cfg: &LossConfig) -> LossGradients {
    let mut g = LossGradients::default();
    for c in 0..4 {
        let d = target.0[c] - pred.mu[c];
        let w = (-pred.beta[c]).exp() * cfg.gamma;
        g.d_mu[c] = -w * d;
        g.d_beta[c] = -w * d * d * 0.5 + 0.5;
    }
    g
}

pub fn grad_loss_neg(pred: &GaussianPrediction, cfg: &LossConfig) -> LossGradients {
    grad_neg_with_variance(pred, cfg.gamma, cfg.sigma1_sq)
}

fn grad_neg_with_variance(pred: &GaussianPrediction, gamma: f64, sigma1_sq: f64) -> LossGradients {
    let mut g = LossGradients::default();
    for c in 0..4 {
        let mu = pred.mu[c];
        let e = (-pred.beta[c]).exp();
        g.d_mu[c] = e * gamma * mu;
        g.d_beta[c] = -e * (gamma * mu * mu + sigma1_sq) * 0.5 + 0.5;
    }
    g
}

/// Gradient of [`loss_kl`].
pub fn grad_loss_kl(target: &TargetDistribution, pred: &GaussianPrediction, cfg: &LossConfig) -> LossGradients {
    match target {
        TargetDistribution::Dirac(mu1) => grad_loss_pos(mu1, pred, cfg),
        TargetDistribution::WideGaussian { variance } => grad_neg_with_variance(pred, cfg.gamma, *variance),
    }
}

/// Cross-entropy part of the Dirac-to-Gaussian divergence for one coordinate,
/// `(mu1 - mu2)^2 / (2 sigma2^2) + ln(2 pi sigma2^2) / 2`, without the
/// (unbounded) entropy of the delta.
pub fn dirac_gaussian_kl_reference(mu1: f64, mu2: f64, sigma2_sq: f64) -> Result<f64> {
    if !(sigma2_sq > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {sigma2_sq}")));
    }
    let d = mu1 - mu2;
    Ok(d * d / (2.0 * sigma2_sq) + 0.5 * (2.0 * std::f64::consts::PI * sigma2_sq).ln())
}

/// Stationary log-variance of the negative loss for a fixed mean:
/// `ln(gamma * mu2^2 + sigma1^2)`.
pub fn neg_stationary_beta(mu2: f64, cfg: &LossConfig) -> f64 {
    (cfg.gamma * mu2 * mu2 + cfg.sigma1_sq).ln()
}
