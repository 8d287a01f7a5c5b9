//! The scaled-down blob segmentation experiment used to check that the whole
//! stack learns: a small model trained on synthetic discs, scored on images
//! it never saw during training or checkpoint selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{apply_split, holdout_split, synth_blobs, SamplePair, SynthConfig};
use crate::losses::LossConfig;
use crate::metrics::{Aggregation, MetricSet};
use crate::model::{ModelConfig, R2AUNet};
use crate::training::{evaluate_model, train, EpochLog, TrainConfig, TrainOutcome};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Images used for training and validation.
    pub n_samples: usize,
    pub val_count: usize,
    /// Extra images generated with the same recipe and only used for scoring.
    pub test_count: usize,
    pub image_size: usize,
    pub imbalance: f64,
    pub depth: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_samples: 200,
            val_count: 30,
            test_count: 50,
            image_size: 64,
            imbalance: 0.08,
            depth: 3,
            base_channels: 8,
            epochs: 20,
            batch_size: 4,
            lr: 1e-4,
        }
    }
}

pub struct ToySplits {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl ToyConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            ..ModelConfig::default()
        }
        .with_size(self.image_size, self.image_size)
    }

    pub fn train_config(&self, loss: LossConfig) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss,
            ..TrainConfig::default()
        };
        cfg.optimizer.lr = self.lr;
        cfg
    }

    /// Generates the data for `seed`. The test images come after the
    /// training pool in generation order, so they are disjoint from it.
    pub fn splits(&self, seed: u64) -> Result<ToySplits> {
        let mut all = synth_blobs(&SynthConfig {
            n_samples: self.n_samples + self.test_count,
            image_size: self.image_size,
            imbalance_target: self.imbalance,
            seed,
            ..SynthConfig::default()
        })?;
        let test = all.split_off(self.n_samples);
        let ids: Vec<String> = all.iter().map(|s| s.id.clone()).collect();
        let manifest = holdout_split(&ids, self.val_count, seed)?;
        let (train, val) = apply_split(all, &manifest)?;
        Ok(ToySplits { train, val, test })
    }
}

pub struct ToyResult {
    pub outcome: TrainOutcome,
    /// Restored model on the validation split that picked it.
    pub val: MetricSet,
    /// Restored model on the unseen test images.
    pub test: MetricSet,
    pub seconds: f64,
}

/// Trains one toy model with `loss` and scores the restored checkpoint.
pub fn run_toy(
    cfg: &ToyConfig,
    loss: LossConfig,
    seed: u64,
    progress: impl FnMut(&EpochLog),
) -> Result<ToyResult> {
    let started = Instant::now();
    let data = cfg.splits(seed)?;
    let model = R2AUNet::<f32>::build(&cfg.model(), seed)?;
    let tcfg = cfg.train_config(loss);
    let outcome = train(model, &data.train, &data.val, &tcfg, seed, None, progress)?;
    let score = |set: &[SamplePair]| {
        evaluate_model(
            &outcome.model,
            set,
            tcfg.threshold,
            Aggregation::Pooled,
            cfg.batch_size,
        )
    };
    let val = score(&data.val)?;
    let test = score(&data.test)?;
    Ok(ToyResult {
        seconds: started.elapsed().as_secs_f64(),
        outcome,
        val,
        test,
    })
}
