//! Class-imbalance losses: weighted BCE, two-class soft Dice, BCE + Dice,
//! Tversky and focal Tversky.
//!
//! Every loss exists in two forms: a closed-form evaluation on slices (used
//! for reporting and as a cross-check) and a builder that records the same
//! formula on a [`Tape`] so its gradient comes from reverse-mode
//! differentiation. [`tversky_grad`] additionally gives the hand-derived
//! Tversky gradient with respect to the foreground and background
//! probabilities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::num_like::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Wbce,
    Dice,
    BceDice,
    Tversky,
    FocalTversky,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Wbce => "Weighted BCE",
            LossKind::Dice => "Dice Loss",
            LossKind::BceDice => "BCE-Dice-Loss",
            LossKind::Tversky => "Tversky",
            LossKind::FocalTversky => "Focal Tversky",
        }
    }
}

fn d_wbce() -> f64 {
    0.5
}
fn d_alpha() -> f64 {
    0.3
}
fn d_beta() -> f64 {
    0.7
}
fn d_gamma() -> f64 {
    0.75
}
fn d_eps() -> f64 {
    1e-6
}
fn d_clip() -> f64 {
    1e-7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Foreground weight of the weighted BCE.
    #[serde(default = "d_wbce")]
    pub wbce_weight: f64,
    /// Tversky false-positive weight.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Tversky false-negative weight.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_clip")]
    pub prob_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::focal_tversky(0.3, 0.7, 0.75)
    }
}

/// Smallest value `1 - TI` is clamped to before the focal power.
pub const FOCAL_FLOOR: f64 = 1e-7;

impl LossConfig {
    fn with_kind(kind: LossKind) -> Self {
        LossConfig {
            kind,
            wbce_weight: d_wbce(),
            alpha: d_alpha(),
            beta: d_beta(),
            gamma: d_gamma(),
            eps: d_eps(),
            prob_clip: d_clip(),
        }
    }

    pub fn wbce(weight: f64) -> Self {
        LossConfig {
            wbce_weight: weight,
            ..Self::with_kind(LossKind::Wbce)
        }
    }

    pub fn dice() -> Self {
        Self::with_kind(LossKind::Dice)
    }

    pub fn bce_dice() -> Self {
        Self::with_kind(LossKind::BceDice)
    }

    pub fn tversky(alpha: f64, beta: f64) -> Self {
        LossConfig {
            alpha,
            beta,
            ..Self::with_kind(LossKind::Tversky)
        }
    }

    pub fn focal_tversky(alpha: f64, beta: f64, gamma: f64) -> Self {
        LossConfig {
            alpha,
            beta,
            gamma,
            ..Self::with_kind(LossKind::FocalTversky)
        }
    }

    /// Checks hyperparameters; on failure returns `(field, message)`.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.eps > 0.0) {
            return Err(("eps", format!("must be > 0, got {}", self.eps)));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err((
                "prob_clip",
                format!("must lie in (0, 0.5), got {}", self.prob_clip),
            ));
        }
        match self.kind {
            LossKind::Wbce if !(self.wbce_weight > 0.0 && self.wbce_weight < 1.0) => Err((
                "wbce_weight",
                format!("must lie in (0, 1), got {}", self.wbce_weight),
            )),
            LossKind::Tversky | LossKind::FocalTversky => {
                if !(self.alpha >= 0.0) {
                    return Err(("alpha", format!("must be >= 0, got {}", self.alpha)));
                }
                if !(self.beta >= 0.0) {
                    return Err(("beta", format!("must be >= 0, got {}", self.beta)));
                }
                if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
                    return Err((
                        "beta",
                        format!("alpha + beta must equal 1, got {}", self.alpha + self.beta),
                    ));
                }
                if self.kind == LossKind::FocalTversky && !(self.gamma > 0.0) {
                    return Err(("gamma", format!("must be > 0, got {}", self.gamma)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, m)| Error::Argument(format!("loss.{f}: {m}")))
    }

    /// Closed-form value on flat probability/target slices.
    pub fn evaluate(&self, pred: &[f64], target: &[f64]) -> Result<f64> {
        self.validate()?;
        check_binary(target)?;
        same_len(pred, target)?;
        Ok(match self.kind {
            LossKind::Wbce => wbce(pred, target, self.wbce_weight, self.prob_clip),
            LossKind::Dice => dice_loss2(pred, target, self.eps),
            LossKind::BceDice => bce_dice(pred, target, self.eps, self.prob_clip),
            LossKind::Tversky => 1.0 - tversky_index(pred, target, self.alpha, self.beta, self.eps),
            LossKind::FocalTversky => {
                focal_tversky(pred, target, self.alpha, self.beta, self.gamma, self.eps)
            }
        })
    }

    /// Records the loss on `tape`; `target` must be a {0, 1} tensor of the
    /// prediction's shape.
    pub fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pred: Var,
        target: &Tensor<T>,
    ) -> Result<Var> {
        self.validate()?;
        if tape.shape(pred) != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {} and target {} differ",
                tape.shape(pred),
                target.shape()
            )));
        }
        check_binary(target.data())?;
        let y = tape.constant(target.clone());
        let c = |v: f64| T::from_f64(v);
        match self.kind {
            LossKind::Wbce => tape_wbce(tape, pred, y, c(self.wbce_weight), c(self.prob_clip)),
            LossKind::Dice => tape_dice_loss2(tape, pred, y, c(self.eps)),
            LossKind::BceDice => {
                let b = tape_bce(tape, pred, y, c(self.prob_clip))?;
                let d = tape_dice_loss2(tape, pred, y, c(self.eps))?;
                tape.add(b, d)
            }
            LossKind::Tversky => {
                let ti =
                    tape_tversky_index(tape, pred, y, c(self.alpha), c(self.beta), c(self.eps))?;
                Ok(tape.one_minus(ti))
            }
            LossKind::FocalTversky => tape_focal_tversky(
                tape,
                pred,
                y,
                c(self.alpha),
                c(self.beta),
                c(self.gamma),
                c(self.eps),
            ),
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("length {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Rejects targets with values outside {0, 1}.
pub fn check_binary<T: Scalar>(target: &[T]) -> Result<()> {
    match target.iter().find(|&&v| v != T::ZERO && v != T::ONE) {
        Some(v) => Err(Error::Argument(format!(
            "target value {v} is not in {{0, 1}}"
        ))),
        None => Ok(()),
    }
}

// ---- closed forms -------------------------------------------------------------

fn clip(p: f64, c: f64) -> f64 {
    p.clamp(c, 1.0 - c)
}

/// Mean binary cross-entropy.
pub fn bce(pred: &[f64], target: &[f64], prob_clip: f64) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clip(p, prob_clip);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / pred.len() as f64
}

/// Mean of `-[w y ln p + (1 - w)(1 - y) ln(1 - p)]`.
pub fn wbce(pred: &[f64], target: &[f64], weight: f64, prob_clip: f64) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clip(p, prob_clip);
            -(weight * y * p.ln() + (1.0 - weight) * (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / pred.len() as f64
}

/// Two-class soft Dice loss, `2 - (foreground score + background score)`.
pub fn dice_loss2(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let (mut pg, mut sp, mut sg, mut bg, mut sb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(target) {
        pg += p * g;
        sp += p;
        sg += g;
        bg += (1.0 - p) * (1.0 - g);
        sb += 2.0 - p - g;
    }
    2.0 - ((2.0 * pg + eps) / (sp + sg + eps) + (2.0 * bg + eps) / (sb + eps))
}

pub fn bce_dice(pred: &[f64], target: &[f64], eps: f64, prob_clip: f64) -> f64 {
    bce(pred, target, prob_clip) + dice_loss2(pred, target, eps)
}

/// Hard Dice coefficient `2TP / (2TP + FP + FN)` of two binary masks; 1 when
/// both are empty.
pub fn dice_coefficient<T: Scalar>(pred: &[T], target: &[T]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(target) {
        match (p == T::ONE, g == T::ONE) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    dice_from_counts(tp, fp, fneg)
}

pub(crate) fn dice_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Tversky sums `(TP, FP, FN)` with independent foreground (`p0`) and
/// background (`p1`) probabilities.
fn tversky_sums(p0: &[f64], p1: &[f64], g0: &[f64]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for ((&a, &b), &g) in p0.iter().zip(p1).zip(g0) {
        tp += a * g;
        fp += a * (1.0 - g);
        fneg += b * g;
    }
    (tp, fp, fneg)
}

/// Tversky index with the background probability supplied separately.
pub fn tversky_index_split(
    p0: &[f64],
    p1: &[f64],
    g0: &[f64],
    alpha: f64,
    beta: f64,
    eps: f64,
) -> f64 {
    let (tp, fp, fneg) = tversky_sums(p0, p1, g0);
    tp / (tp + alpha * fp + beta * fneg + eps)
}

/// `TI = sum p0 g0 / (sum p0 g0 + alpha sum p0 g1 + beta sum p1 g0 + eps)`
/// with `p1 = 1 - p0`, `g1 = 1 - g0`.
pub fn tversky_index(p0: &[f64], g0: &[f64], alpha: f64, beta: f64, eps: f64) -> f64 {
    let p1: Vec<f64> = p0.iter().map(|p| 1.0 - p).collect();
    tversky_index_split(p0, &p1, g0, alpha, beta, eps)
}

/// `(1 - TI)^gamma`, with `1 - TI` floored at [`FOCAL_FLOOR`].
pub fn focal_tversky(p0: &[f64], g0: &[f64], alpha: f64, beta: f64, gamma: f64, eps: f64) -> f64 {
    (1.0 - tversky_index(p0, g0, alpha, beta, eps))
        .max(FOCAL_FLOOR)
        .powf(gamma)
}

/// Partial derivatives of the Tversky index (without smoothing term).
#[derive(Clone, Debug, PartialEq)]
pub struct TverskyGrad {
    /// dT/dp0_j, treating p1 as independent.
    pub d_p0: Vec<f64>,
    /// dT/dp1_j, treating p0 as independent.
    pub d_p1: Vec<f64>,
}

impl TverskyGrad {
    /// Total derivative under `p1 = 1 - p0`.
    pub fn total(&self) -> Vec<f64> {
        self.d_p0
            .iter()
            .zip(&self.d_p1)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Hand-derived Tversky gradient:
///
/// ```text
/// dT/dp0_j = [g0_j D - (g0_j + alpha g1_j) TP] / D^2
/// dT/dp1_j = -beta g0_j TP / D^2
/// D = TP + alpha sum p0 g1 + beta sum p1 g0
/// ```
pub fn tversky_grad(p0: &[f64], g0: &[f64], alpha: f64, beta: f64) -> TverskyGrad {
    let p1: Vec<f64> = p0.iter().map(|p| 1.0 - p).collect();
    let (tp, fp, fneg) = tversky_sums(p0, &p1, g0);
    let d = tp + alpha * fp + beta * fneg;
    let d2 = d * d;
    let d_p0 = g0
        .iter()
        .map(|&g| (g * d - (g + alpha * (1.0 - g)) * tp) / d2)
        .collect();
    let d_p1 = g0.iter().map(|&g| -beta * g * tp / d2).collect();
    TverskyGrad { d_p0, d_p1 }
}

// ---- tape builders ------------------------------------------------------------

fn clipped<T: Scalar>(tape: &mut Tape<T>, p: Var, c: T) -> Var {
    tape.clamp(p, c, T::ONE - c)
}

/// `mean(-[w y ln p + (1 - w)(1 - y) ln(1 - p)])` on the tape.
pub fn tape_wbce<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var, weight: T, clip: T) -> Result<Var> {
    let pc = clipped(tape, p, clip);
    let lp = tape.ln(pc);
    let q = tape.one_minus(pc);
    let lq = tape.ln(q);
    let ny = tape.one_minus(y);
    let pos = tape.mul(y, lp)?;
    let neg = tape.mul(ny, lq)?;
    let pos = tape.scale(pos, weight);
    let neg = tape.scale(neg, T::ONE - weight);
    let s = tape.add(pos, neg)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -T::ONE))
}

pub fn tape_bce<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var, clip: T) -> Result<Var> {
    let pc = clipped(tape, p, clip);
    let lp = tape.ln(pc);
    let q = tape.one_minus(pc);
    let lq = tape.ln(q);
    let ny = tape.one_minus(y);
    let pos = tape.mul(y, lp)?;
    let neg = tape.mul(ny, lq)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -T::ONE))
}

fn ratio_plus_eps<T: Scalar>(tape: &mut Tape<T>, num: Var, den: Var, eps: T) -> Result<Var> {
    let n = tape.affine(num, T::ONE, eps);
    let d = tape.affine(den, T::ONE, eps);
    tape.div(n, d)
}

pub fn tape_dice_loss2<T: Scalar>(tape: &mut Tape<T>, p: Var, g: Var, eps: T) -> Result<Var> {
    let two = T::from_f64(2.0);
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg);
    let inter2 = tape.scale(inter, two);
    let sp = tape.sum(p);
    let sg = tape.sum(g);
    let union = tape.add(sp, sg)?;
    let fg = ratio_plus_eps(tape, inter2, union, eps)?;

    let q = tape.one_minus(p);
    let h = tape.one_minus(g);
    let qh = tape.mul(q, h)?;
    let binter = tape.sum(qh);
    let binter2 = tape.scale(binter, two);
    let sq = tape.sum(q);
    let sh = tape.sum(h);
    let bunion = tape.add(sq, sh)?;
    let bgs = ratio_plus_eps(tape, binter2, bunion, eps)?;

    let score = tape.add(fg, bgs)?;
    Ok(tape.affine(score, -T::ONE, two))
}

pub fn tape_tversky_index<T: Scalar>(
    tape: &mut Tape<T>,
    p0: Var,
    g0: Var,
    alpha: T,
    beta: T,
    eps: T,
) -> Result<Var> {
    let p1 = tape.one_minus(p0);
    let g1 = tape.one_minus(g0);
    let tp = tape.mul(p0, g0)?;
    let tp = tape.sum(tp);
    let fp = tape.mul(p0, g1)?;
    let fp = tape.sum(fp);
    let fneg = tape.mul(p1, g0)?;
    let fneg = tape.sum(fneg);
    let afp = tape.scale(fp, alpha);
    let bfn = tape.scale(fneg, beta);
    let d = tape.add(tp, afp)?;
    let d = tape.add(d, bfn)?;
    let d = tape.affine(d, T::ONE, eps);
    tape.div(tp, d)
}

pub fn tape_focal_tversky<T: Scalar>(
    tape: &mut Tape<T>,
    p0: Var,
    g0: Var,
    alpha: T,
    beta: T,
    gamma: T,
    eps: T,
) -> Result<Var> {
    let ti = tape_tversky_index(tape, p0, g0, alpha, beta, eps)?;
    let miss = tape.one_minus(ti);
    // unbounded upper limit; only the floor matters
    let miss = tape.clamp(miss, T::from_f64(FOCAL_FLOOR), T::from_f64(f64::MAX.sqrt()));
    Ok(tape.pow(miss, gamma))
}
