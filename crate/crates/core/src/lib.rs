//! Region proposals scored by predicted offset uncertainty.
//!
//! Each anchor predicts a Gaussian over its four box offsets. Positive
//! anchors are trained towards a Dirac target at the true offsets, negative
//! anchors towards a wide zero-mean Gaussian, both through one KL-divergence
//! loss. The objectness of an anchor is the inverse of the product of its
//! predicted standard deviations, so no separate classifier is needed.
//!
//! ```
//! use klrpn::geometry::{decode_offsets, encode_offsets, BBox};
//! use klrpn::kl_losses::{loss_kl, GaussianPrediction, LossConfig};
//! use klrpn::assignment::TargetDistribution;
//! use klrpn::scoring::objectness;
//!
//! let anchor = BBox::new(0.0, 0.0, 16.0, 16.0)?;
//! let gt = BBox::new(2.0, 0.0, 18.0, 16.0)?;
//! let t = encode_offsets(&anchor, &gt)?;
//! assert_eq!(decode_offsets(&anchor, &t), gt);
//!
//! let cfg = LossConfig::default();
//! let sure = GaussianPrediction::new(t.0, [-6.0; 4]);
//! let unsure = GaussianPrediction::new(t.0, [0.0; 4]);
//! let target = TargetDistribution::Dirac(t);
//! assert!(loss_kl(&target, &sure, &cfg) < loss_kl(&target, &unsure, &cfg));
//! assert!(objectness(&sure, 1e-12) > objectness(&unsure, 1e-12));
//! # Ok::<(), klrpn::Error>(())
//! ```
//!
//! The guide in `book/` walks through each module; its code blocks are
//! compiled and run as doc-tests of this crate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kl_losses;
pub mod scoring;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/assignment.md")]
    mod assignment {}
    #[doc = include_str!("../../../book/src/kl-losses.md")]
    mod kl_losses {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/offset-analysis.md")]
    mod offset_analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
