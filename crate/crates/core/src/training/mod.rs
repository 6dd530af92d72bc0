//! Seeded end-to-end training of the toy heads.

pub mod adam;
pub mod head;
pub mod scene;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_anchors, build_targets, sample_minibatch, AssignmentConfig, AssignmentLabel, TargetDistribution,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate_recall;
use crate::geometry::{generate_anchors, BBox};

use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use head::{backward, HeadVariant, ToyHead};
use scene::{derive_seed, features_for, gen_layout, gen_scene_for_anchors, SceneLayout, SyntheticScene};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const MINIBATCH_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: HeadVariant,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub steps: usize,
    pub scenes_per_step: usize,
    /// Anchors sampled per scene and step. Replaces
    /// `assignment.minibatch_size` during training; the positive fraction
    /// and seed still come from the assignment section.
    pub minibatch_anchors: usize,
    /// Standard deviation of the initial parameters.
    pub init_std: f64,
    pub clip_norm: Option<f64>,
    /// Recall is measured every `eval_every` steps and at the final step.
    pub eval_every: usize,
    /// Leading scenes of the held-out set used for the recall monitor.
    pub monitor_scenes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: HeadVariant::KlRpn,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            steps: 60000,
            scenes_per_step: 2,
            minibatch_anchors: 64,
            init_std: 1e-5,
            clip_norm: None,
            eval_every: 5000,
            monitor_scenes: 20,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("train.adam_epsilon", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be positive"));
        }
        if self.scenes_per_step == 0 {
            return Err(Error::config("train.scenes_per_step", "must be positive"));
        }
        if self.minibatch_anchors == 0 {
            return Err(Error::config("train.minibatch_anchors", "must be positive"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("train.init_std", "must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// One line of the training history. `recall` is recall@300 at IoU 0.5 on
/// the monitor scenes, present only on evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "recall@300@0.5")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub records: Vec<StepRecord>,
}

impl TrainingHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Domain(format!("history line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(TrainingHistory { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Last recorded recall, if any.
    pub fn final_recall(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.recall)
    }

    /// Mean loss over the first and last `window` records.
    pub fn loss_trend(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..w]), mean(&self.records[n - w..])))
    }
}

/// Layout of the `index`-th scene in the training stream.
pub fn training_layout(cfg: &RunConfig, index: usize) -> SceneLayout {
    gen_layout(
        derive_seed(cfg.train.seed, TRAIN_STREAM, index as u64),
        &cfg.grid,
        &cfg.scene,
    )
}

/// The held-out set: `eval.scenes` scenes seeded from `eval.seed`.
pub fn eval_scenes(cfg: &RunConfig, anchors: &[BBox]) -> Vec<SyntheticScene> {
    (0..cfg.eval.scenes)
        .map(|i| {
            gen_scene_for_anchors(
                derive_seed(cfg.eval.seed, EVAL_STREAM, i as u64),
                &cfg.grid,
                anchors,
                &cfg.scene,
            )
        })
        .collect()
}

/// Trains `cfg.train.variant` from a fresh initialization.
///
/// Every step draws `scenes_per_step` new scenes from the training stream,
/// samples one minibatch per scene, generates features for the sampled
/// anchors only, and takes one Adam step on the mean loss over all sampled
/// anchors. A non-finite loss or gradient aborts with [`Error::Divergence`].
pub fn train(cfg: &RunConfig) -> Result<(ToyHead, TrainingHistory)> {
    cfg.validate()?;
    let tc = &cfg.train;
    let anchors = generate_anchors(&cfg.grid);
    let monitor: Vec<SyntheticScene> = eval_scenes(cfg, &anchors).into_iter().take(tc.monitor_scenes).collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, INIT_STREAM, 0));
    let mut head = ToyHead::random_normal(tc.variant, cfg.scene.feature_dim, tc.init_std, &mut init_rng);
    let sampler = AssignmentConfig {
        minibatch_size: tc.minibatch_anchors,
        ..cfg.assignment.clone()
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.assignment.seed, MINIBATCH_STREAM, 0));
    let adam_cfg = tc.adam();
    let mut state = AdamState::new(head.param_count());
    let mut history = TrainingHistory::default();

    for step in 0..tc.steps {
        let mut grads = vec![0.0; head.param_count()];
        let mut loss = 0.0;
        let mut count = 0usize;
        for k in 0..tc.scenes_per_step {
            let layout = training_layout(cfg, step * tc.scenes_per_step + k);
            let labels = assign_anchors(&anchors, &layout.gt_boxes, &cfg.assignment);
            let picked = sample_minibatch(&labels, &sampler, &mut batch_rng);
            if picked.is_empty() {
                continue;
            }
            let picked_labels: Vec<AssignmentLabel> = picked.iter().map(|&i| labels[i]).collect();
            let picked_anchors: Vec<BBox> = picked.iter().map(|&i| anchors[i]).collect();
            let targets = build_targets(&picked_labels, &picked_anchors, &layout.gt_boxes, cfg.loss.sigma1_sq)?;
            let batch: Vec<(usize, TargetDistribution)> = targets
                .into_iter()
                .enumerate()
                .filter_map(|(r, t)| t.map(|t| (r, t)))
                .collect();
            let features = features_for(&layout, &anchors, &picked, &cfg.scene);
            let (l, g) = backward(&head, &features, &batch, &cfg.loss)?;
            let n = batch.len() as f64;
            loss += l * n;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b * n);
            count += batch.len();
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            loss *= inv;
            grads.iter_mut().for_each(|g| *g *= inv);
        }
        if !loss.is_finite() || !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        if let Some(max) = tc.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        adam_step(&mut state, &mut head.params, &grads, &adam_cfg);
        if !head.params.iter().all(|p| p.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }

        let recall = if (step + 1) % tc.eval_every == 0 || step + 1 == tc.steps {
            let table = evaluate_recall(&head, &anchors, &monitor, &cfg.proposal, &[300], &[0.5])?;
            table.get(300, 0.5)
        } else {
            None
        };
        history.records.push(StepRecord { step, loss, recall });
    }
    Ok((head, history))
}
