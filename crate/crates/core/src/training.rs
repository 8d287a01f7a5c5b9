//! NADAM optimization, learning-rate schedule, checkpoint registry, the
//! training loop and the loss ablation grid.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::checkpoint;
use crate::data::{augment, AugmentConfig, SamplePair};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{evaluate, Aggregation, MetricSet, MetricsRow};
use crate::model::{ModelConfig, R2AUNet};
use crate::nn::{Mode, Module};
use crate::tensor::num_like::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

// ---- configuration --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NadamConfig {
    pub lr: f64,
    /// Inverse-time decay per epoch.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            lr: 1e-4,
            decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    /// Non-improving epochs tolerated before reducing.
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 3,
            factor: 0.5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Snapshots retained, ranked by validation Dice.
    pub top_k: usize,
    /// Restore the parameter average of the retained snapshots instead of
    /// the single best one.
    pub average: bool,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            top_k: 1,
            average: false,
        }
    }
}

fn default_loss() -> LossConfig {
    LossConfig::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_loss")]
    pub loss: LossConfig,
    pub optimizer: NadamConfig,
    pub plateau: PlateauConfig,
    pub checkpoint: CheckpointConfig,
    /// On-the-fly augmentation of training batches; `None` disables it.
    pub augment: Option<AugmentConfig>,
    /// Probability threshold for validation masks.
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Stop once validation Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            loss: LossConfig::default(),
            optimizer: NadamConfig::default(),
            plateau: PlateauConfig::default(),
            checkpoint: CheckpointConfig::default(),
            augment: None,
            threshold: 0.5,
            aggregation: Aggregation::Pooled,
            target_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> std::result::Result<(), (String, String)> {
        let err = |f: &str, m: String| Err((f.to_owned(), m));
        if self.epochs == 0 {
            return err("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if let Err((f, m)) = self.loss.check() {
            return err(&format!("loss.{f}"), m);
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return err("optimizer.lr", format!("must be positive, got {}", o.lr));
        }
        if !(o.decay >= 0.0) {
            return err("optimizer.decay", format!("must be >= 0, got {}", o.decay));
        }
        for (f, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return err(f, format!("must lie in (0, 1), got {b}"));
            }
        }
        if !(o.eps > 0.0) {
            return err("optimizer.eps", "must be positive".into());
        }
        let p = &self.plateau;
        if p.patience == 0 {
            return err("plateau.patience", "must be at least 1".into());
        }
        if !(p.factor > 0.0 && p.factor <= 1.0) {
            return err(
                "plateau.factor",
                format!("must lie in (0, 1], got {}", p.factor),
            );
        }
        if !(p.min_lr >= 0.0) {
            return err("plateau.min_lr", "must be >= 0".into());
        }
        if self.checkpoint.top_k == 0 {
            return err("checkpoint.top_k", "must be at least 1".into());
        }
        if let Some(a) = &self.augment {
            if let Err((f, m)) = a.check() {
                return err(&format!("augment.{f}"), m);
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return err(
                "threshold",
                format!("must lie in (0, 1), got {}", self.threshold),
            );
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, m)| Error::Argument(format!("train.{f}: {m}")))
    }
}

// ---- optimizer ----------------------------------------------------------------------

/// NADAM with a constant momentum schedule:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// m_hat = b1 m / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)
/// theta -= lr m_hat / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Nadam {
    pub fn new(cfg: &NadamConfig) -> Self {
        Nadam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// First and second moment of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates one tensor in place. `step` must already be advanced.
    fn update<T: Scalar>(&mut self, name: &str, value: &mut [T], grad: &[T], lr: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c1_next = 1.0 - b1.powi(t + 1);
        let c2 = 1.0 - b2.powi(t);
        let (m, v) = self
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| (vec![0.0; value.len()], vec![0.0; value.len()]));
        for i in 0..value.len() {
            let g = grad[i].to_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_bar = b1 * m[i] / c1_next + (1.0 - b1) * g / c1;
            let v_hat = v[i] / c2;
            let p = value[i].to_f64() - lr * m_bar / (v_hat.sqrt() + eps);
            value[i] = T::from_f64(p);
        }
    }

    /// One step over every trainable parameter that received a gradient.
    pub fn step_module<T: Scalar, M: Module<T>>(
        &mut self,
        module: &mut M,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        // validate first so a bad gradient leaves the model untouched
        let mut bad = None;
        module.visit(&mut |p| {
            if bad.is_none() && p.trainable {
                if let Some(g) = grads.param(&p.name) {
                    if !g.iter().all(|v| v.is_finite()) {
                        bad = Some(p.name.clone());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter `{name}`"
            )));
        }
        self.step += 1;
        module.visit_mut(&mut |p| {
            if p.trainable {
                if let Some(g) = grads.param(&p.name) {
                    let name = p.name.clone();
                    self.update(&name, p.value.data_mut(), g, lr);
                }
            }
        });
        Ok(())
    }

    /// Step on a bare named tensor.
    pub fn step_tensor<T: Scalar>(
        &mut self,
        name: &str,
        value: &mut Tensor<T>,
        grad: &[T],
        lr: f64,
    ) -> Result<()> {
        if grad.len() != value.len() {
            return Err(Error::Shape(format!(
                "gradient of `{name}` has the wrong length"
            )));
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter `{name}`"
            )));
        }
        self.step += 1;
        self.update(name, value.data_mut(), grad, lr);
        Ok(())
    }
}

/// Learning rate for 0-based `epoch` given validation scores of the epochs
/// before it: inverse-time decay applied to a plateau-reduced base rate.
pub fn lr_schedule(
    opt: &NadamConfig,
    plateau: &PlateauConfig,
    epoch: usize,
    val_history: &[f64],
) -> f64 {
    let mut base = opt.lr;
    let mut best = f64::NEG_INFINITY;
    let mut wait = 0;
    for &v in val_history.iter().take(epoch) {
        if v > best {
            best = v;
            wait = 0;
        } else {
            wait += 1;
            if wait >= plateau.patience {
                base = (base * plateau.factor).max(plateau.min_lr.min(base));
                wait = 0;
            }
        }
    }
    base / (1.0 + opt.decay * epoch as f64)
}

// ---- checkpoint registry ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub epoch: usize,
    pub val_dice: f64,
    pub path: Option<PathBuf>,
}

/// Best-scoring snapshots of one run, highest validation Dice first
/// (earlier epoch wins ties).
#[derive(Clone, Debug, Default)]
pub struct CheckpointRegistry {
    pub entries: Vec<CheckpointEntry>,
    snapshots: Vec<R2AUNet<f32>>,
    top_k: usize,
}

pub fn checkpoint_file_name(epoch: usize, dice: f64) -> String {
    format!("ckpt_e{epoch}_d{dice:.4}.r2au")
}

impl CheckpointRegistry {
    pub fn new(top_k: usize) -> Self {
        CheckpointRegistry {
            entries: Vec::new(),
            snapshots: Vec::new(),
            top_k: top_k.max(1),
        }
    }

    /// Index 0 holds the best entry.
    pub fn best(&self) -> Option<&CheckpointEntry> {
        self.entries.first()
    }

    pub fn best_model(&self) -> Option<&R2AUNet<f32>> {
        self.snapshots.first()
    }

    /// Registers a snapshot if it ranks in the top `k`; returns whether it was kept.
    pub fn offer(
        &mut self,
        epoch: usize,
        val_dice: f64,
        model: &R2AUNet<f32>,
        dir: Option<&Path>,
    ) -> Result<bool> {
        let pos = self
            .entries
            .iter()
            .position(|e| val_dice > e.val_dice)
            .unwrap_or(self.entries.len());
        if pos >= self.top_k {
            return Ok(false);
        }
        let path = match dir {
            Some(d) => {
                let p = d.join(checkpoint_file_name(epoch, val_dice));
                checkpoint::save(model, &p)?;
                Some(p)
            }
            None => None,
        };
        self.entries.insert(
            pos,
            CheckpointEntry {
                epoch,
                val_dice,
                path,
            },
        );
        self.snapshots.insert(pos, model.clone());
        while self.entries.len() > self.top_k {
            let gone = self.entries.pop().unwrap();
            self.snapshots.pop();
            if let Some(p) = gone.path {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(true)
    }

    /// Element-wise mean of every retained snapshot (parameters and
    /// running statistics).
    pub fn averaged(&self) -> Option<R2AUNet<f32>> {
        let first = self.snapshots.first()?;
        let mut out = first.clone();
        let n = self.snapshots.len() as f64;
        let mut sums: HashMap<String, Vec<f64>> = HashMap::new();
        for s in &self.snapshots {
            s.visit(&mut |p| {
                let acc = sums
                    .entry(p.name.clone())
                    .or_insert_with(|| vec![0.0; p.value.len()]);
                for (a, v) in acc.iter_mut().zip(p.value.data()) {
                    *a += *v as f64;
                }
            });
        }
        out.visit_mut(&mut |p| {
            let acc = &sums[&p.name];
            for (v, a) in p.value.data_mut().iter_mut().zip(acc) {
                *v = (a / n) as f32;
            }
        });
        Some(out)
    }
}

// ---- training loop ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricSet,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str =
    "epoch,train_loss,val_dice,val_precision,val_recall,val_accuracy,val_auc,val_kappa,lr";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        let v = &e.val;
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:e}",
            e.epoch, e.train_loss, v.dice, v.precision, v.recall, v.accuracy, v.auc, v.kappa, e.lr
        );
    }
    s
}

pub struct TrainOutcome {
    /// Restored best (or averaged) weights.
    pub model: R2AUNet<f32>,
    pub registry: CheckpointRegistry,
    pub log: Vec<EpochLog>,
    /// Number of optimizer steps taken.
    pub steps: u64,
}

impl TrainOutcome {
    /// Validation metrics of the restored epoch.
    pub fn best_metrics(&self) -> Option<MetricSet> {
        let e = self.registry.best()?.epoch;
        self.log.iter().find(|l| l.epoch == e).map(|l| l.val)
    }
}

/// Stacks image and mask tensors of the selected samples into batches.
pub fn stack_batch(samples: &[&SamplePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Eval-mode probabilities for every sample, computed in batches.
pub fn predict_all(
    model: &R2AUNet<f32>,
    samples: &[SamplePair],
    batch: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs)?;
        let p = model.predict(&x)?;
        for i in 0..chunk.len() {
            out.push(p.sample(i));
        }
    }
    Ok(out)
}

/// Dataset metrics of `model` on `samples`.
pub fn evaluate_model(
    model: &R2AUNet<f32>,
    samples: &[SamplePair],
    threshold: f64,
    mode: Aggregation,
    batch: usize,
) -> Result<MetricSet> {
    let probs = predict_all(model, samples, batch)?;
    let pairs: Vec<(&[f32], &[f32])> = probs
        .iter()
        .zip(samples)
        .map(|(p, s)| (p.data(), s.mask.data()))
        .collect();
    evaluate(&pairs, threshold, mode)
}

/// Mean training loss of `model` on `samples` in train mode without updates.
fn batch_loss(
    model: &R2AUNet<f32>,
    loss: &LossConfig,
    batch: &[&SamplePair],
) -> Result<(f64, Tape<f32>, crate::Var)> {
    let (x, y) = stack_batch(batch)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let p = model.forward(&mut tape, xv, Mode::Train)?;
    let l = loss.build(&mut tape, p, &y)?;
    let v = tape.value(l).data()[0] as f64;
    Ok((v, tape, l))
}

/// Trains `model` and restores the best checkpoint.
///
/// `dir`, when given, receives checkpoint files and a `metrics.csv` that is
/// rewritten after every epoch. `progress` sees each epoch's log line.
pub fn train(
    mut model: R2AUNet<f32>,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    seed: u64,
    dir: Option<&Path>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let train_ids: BTreeSet<&str> = train_set.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::Argument(format!(
            "sample `{}` is in both training and validation sets",
            s.id
        )));
    }
    let mut opt = Nadam::new(&cfg.optimizer);
    let mut registry = CheckpointRegistry::new(cfg.checkpoint.top_k);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(&cfg.optimizer, &cfg.plateau, epoch, &history);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<SamplePair>;
            let batch: Vec<&SamplePair> = match &cfg.augment {
                Some(a) => {
                    augmented = chunk
                        .iter()
                        .map(|&i| augment(&train_set[i], a, epoch as u64))
                        .collect();
                    augmented.iter().collect()
                }
                None => chunk.iter().map(|&i| &train_set[i]).collect(),
            };
            let (value, tape, root) = batch_loss(&model, &cfg.loss, &batch)?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite at epoch {}, batch {}: {value}",
                    epoch + 1,
                    bi + 1
                )));
            }
            let grads = tape.backward(root)?;
            opt.step_module(&mut model, &grads, lr).map_err(|e| {
                Error::Training(format!("epoch {}, batch {}: {e}", epoch + 1, bi + 1))
            })?;
            model.commit_batch_stats(tape.batch_stats());
            loss_sum += value;
            batches += 1;
        }
        let val = evaluate_model(
            &model,
            val_set,
            cfg.threshold,
            cfg.aggregation,
            cfg.batch_size,
        )?;
        history.push(val.dice);
        registry.offer(epoch + 1, val.dice, &model, dir)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            val,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&entry);
        log.push(entry);
        if let Some(d) = dir {
            checkpoint::write_atomic(&d.join("metrics.csv"), log_csv(&log).as_bytes())?;
        }
        if cfg.target_dice.is_some_and(|t| val.dice >= t) {
            break;
        }
    }
    let restored = if cfg.checkpoint.average {
        registry.averaged()
    } else {
        registry.best_model().cloned()
    };
    Ok(TrainOutcome {
        model: restored.expect("at least one epoch ran"),
        registry,
        log,
        steps: opt.step,
    })
}

// ---- ablation grid ---------------------------------------------------------------

/// One loss configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub loss: LossConfig,
}

impl GridRow {
    pub fn label(&self) -> &'static str {
        match self.loss.kind {
            LossKind::Wbce if self.loss.wbce_weight == 0.5 => "Binary Cross Entropy",
            k => k.label(),
        }
    }

    /// `(alpha, beta, gamma)` as reported; absent where not applicable.
    pub fn hyper(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let l = &self.loss;
        match l.kind {
            LossKind::Tversky => (Some(l.alpha), Some(l.beta), None),
            LossKind::FocalTversky => (Some(l.alpha), Some(l.beta), Some(l.gamma)),
            _ => (None, None, None),
        }
    }
}

/// The 19 loss configurations of the published ablation, in table order.
pub fn table1_grid() -> Vec<GridRow> {
    let ftl = [
        (0.4, 0.6, 0.75),
        (0.3, 0.7, 0.75),
        (0.2, 0.8, 0.75),
        (0.3, 0.7, 0.80),
        (0.3, 0.7, 0.90),
        (0.3, 0.7, 0.65),
        (0.2, 0.8, 0.65),
        (0.2, 0.8, 0.55),
        (0.2, 0.8, 0.45),
        (0.2, 0.8, 0.50),
        (0.2, 0.8, 0.85),
        (0.4, 0.6, 0.85),
        (0.4, 0.6, 0.65),
    ];
    let mut rows: Vec<GridRow> = ftl
        .iter()
        .map(|&(a, b, g)| GridRow {
            loss: LossConfig::focal_tversky(a, b, g),
        })
        .collect();
    rows.push(GridRow {
        loss: LossConfig::dice(),
    });
    rows.push(GridRow {
        loss: LossConfig::bce_dice(),
    });
    for (a, b) in [(0.2, 0.8), (0.3, 0.7), (0.4, 0.6)] {
        rows.push(GridRow {
            loss: LossConfig::tversky(a, b),
        });
    }
    rows.push(GridRow {
        loss: LossConfig::wbce(0.5),
    });
    rows
}

/// Result of one grid row; training errors are kept rather than aborting the grid.
pub struct GridResult {
    pub row: GridRow,
    pub outcome: Result<MetricsRow>,
}

/// Trains one model per grid row under the same seed and budget.
pub fn ablation_grid(
    dataset: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &[GridRow],
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    seed: u64,
    mut on_row: impl FnMut(usize, &GridResult),
) -> Result<Vec<GridResult>> {
    if grid.is_empty() {
        return Err(Error::Argument("ablation grid is empty".into()));
    }
    let mut results = Vec::with_capacity(grid.len());
    for (i, row) in grid.iter().enumerate() {
        let cfg = TrainConfig {
            loss: row.loss.clone(),
            ..train_cfg.clone()
        };
        let outcome = R2AUNet::<f32>::build(model_cfg, seed)
            .and_then(|m| train(m, train_set, val_set, &cfg, seed, None, |_| {}))
            .and_then(|o| {
                let metrics = o
                    .best_metrics()
                    .ok_or_else(|| Error::Training("no epoch completed".into()))?;
                let (alpha, beta, gamma) = row.hyper();
                Ok(MetricsRow {
                    dataset: dataset.to_owned(),
                    model_variant: model_cfg.variant_name().to_owned(),
                    loss: row.label().to_owned(),
                    alpha,
                    beta,
                    gamma,
                    metrics,
                })
            });
        let r = GridResult {
            row: row.clone(),
            outcome,
        };
        on_row(i, &r);
        results.push(r);
    }
    Ok(results)
}
