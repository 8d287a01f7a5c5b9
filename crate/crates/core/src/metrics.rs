//! Segmentation statistics: confusion counts, Dice, precision, recall,
//! accuracy, Cohen's kappa and ROC AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::tensor::num_like::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fneg: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fneg + self.tn
    }

    /// Counts for `(pred, target)` swapped.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tp,
            fp: self.fneg,
            fneg: self.fp,
            tn: self.tn,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fneg: self.fneg + o.fneg,
            tn: self.tn + o.tn,
        }
    }
}

fn is_binary<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|&x| x == T::ZERO || x == T::ONE)
}

/// Pixel counts of a binary prediction against a binary target.
pub fn confusion<T: Scalar>(pred: &[T], target: &[T]) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        )));
    }
    if !is_binary(pred) || !is_binary(target) {
        return Err(Error::Argument("confusion counts need binary masks".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(target) {
        match (p == T::ONE, g == T::ONE) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fneg += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

/// `num / den`, or 1 when nothing was predicted or missed at all and 0 when
/// the denominator vanishes otherwise.
fn ratio(num: u64, den: u64, other_errors: u64) -> f64 {
    if den == 0 {
        if other_errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let total = c.total() as f64;
    // precision = tp/(tp+fp); degenerate when nothing is predicted
    let precision = ratio(c.tp, c.tp + c.fp, c.fneg);
    let recall = ratio(c.tp, c.tp + c.fneg, c.fp);
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fneg, 0);
    let accuracy = if total > 0.0 {
        (c.tp + c.tn) as f64 / total
    } else {
        1.0
    };
    let kappa = if total > 0.0 {
        let po = accuracy;
        let pred_pos = (c.tp + c.fp) as f64 / total;
        let true_pos = (c.tp + c.fneg) as f64 / total;
        let pe = pred_pos * true_pos + (1.0 - pred_pos) * (1.0 - true_pos);
        if pe >= 1.0 {
            if po >= 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (po - pe) / (1.0 - pe)
        }
    } else {
        1.0
    };
    ScalarMetrics {
        dice,
        precision,
        recall,
        accuracy,
        kappa,
    }
}

/// Probability that a random positive pixel outscores a random negative one,
/// ties counting one half (average-rank Mann-Whitney statistic).
pub fn roc_auc<T: Scalar>(scores: &[T], target: &[T]) -> Result<f64> {
    if scores.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            target.len()
        )));
    }
    if !is_binary(target) {
        return Err(Error::Argument("AUC target must be binary".into()));
    }
    let n_pos = target.iter().filter(|&&g| g == T::ONE).count();
    let n_neg = target.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative pixels".into(),
        ));
    }
    let s: Vec<f64> = scores.iter().map(|v| v.to_f64()).collect();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::Argument("AUC scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && s[order[j]] == s[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if target[k] == T::ONE {
                pos_rank_sum += avg;
            }
        }
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// How per-image statistics are combined over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// All pixels of all images form one population.
    #[default]
    Pooled,
    /// Metrics per image, then the arithmetic mean.
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// `NaN` when undefined (single-class targets).
    pub auc: f64,
    pub kappa: f64,
}

impl MetricSet {
    fn from_parts(m: ScalarMetrics, auc: f64) -> Self {
        MetricSet {
            dice: m.dice,
            precision: m.precision,
            recall: m.recall,
            accuracy: m.accuracy,
            auc,
            kappa: m.kappa,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.dice,
            self.precision,
            self.recall,
            self.accuracy,
            self.auc,
            self.kappa,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Thresholds probabilities at `threshold` (`>=` is foreground).
pub fn binarize_slice<T: Scalar>(probs: &[T], threshold: f64) -> Vec<T> {
    probs
        .iter()
        .map(|&p| {
            if p.to_f64() >= threshold {
                T::ONE
            } else {
                T::ZERO
            }
        })
        .collect()
}

/// Dataset metrics from per-image `(probabilities, target)` pairs.
pub fn evaluate<T: Scalar>(
    images: &[(&[T], &[T])],
    threshold: f64,
    mode: Aggregation,
) -> Result<MetricSet> {
    if images.is_empty() {
        return Err(Error::Argument("no images to evaluate".into()));
    }
    match mode {
        Aggregation::Pooled => {
            let mut counts = ConfusionCounts::default();
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (p, g) in images {
                counts = counts + confusion(&binarize_slice(p, threshold), g)?;
                scores.extend_from_slice(p);
                labels.extend_from_slice(g);
            }
            let auc = match roc_auc(&scores, &labels) {
                Ok(a) => a,
                Err(Error::UndefinedMetric(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            Ok(MetricSet::from_parts(scalar_metrics(&counts), auc))
        }
        Aggregation::PerImage => {
            let mut sums = [0.0; 5];
            let (mut auc_sum, mut auc_n) = (0.0, 0usize);
            for (p, g) in images {
                let m = scalar_metrics(&confusion(&binarize_slice(p, threshold), g)?);
                for (s, v) in
                    sums.iter_mut()
                        .zip([m.dice, m.precision, m.recall, m.accuracy, m.kappa])
                {
                    *s += v;
                }
                match roc_auc(p, g) {
                    Ok(a) => {
                        auc_sum += a;
                        auc_n += 1;
                    }
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let n = images.len() as f64;
            Ok(MetricSet {
                dice: sums[0] / n,
                precision: sums[1] / n,
                recall: sums[2] / n,
                accuracy: sums[3] / n,
                auc: if auc_n == 0 {
                    f64::NAN
                } else {
                    auc_sum / auc_n as f64
                },
                kappa: sums[4] / n,
            })
        }
    }
}

pub const CSV_HEADER: &str =
    "dataset,model_variant,loss,alpha,beta,gamma,dice,precision,recall,accuracy,auc,kappa";

/// One evaluation row in the metrics CSV schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub model_variant: String,
    pub loss: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub metrics: MetricSet,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let m = &self.metrics;
        let mut out = String::new();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.dataset),
            csv_field(&self.model_variant),
            csv_field(&self.loss),
            opt(self.alpha),
            opt(self.beta),
            opt(self.gamma),
            num(m.dice),
            num(m.precision),
            num(m.recall),
            num(m.accuracy),
            num(m.auc),
            num(m.kappa),
        );
        out
    }
}
