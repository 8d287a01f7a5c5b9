//! Central finite-difference gradient checks.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, R2AUNet};
use crate::nn::{
    AttentionGate, BatchNorm, Conv2d, InitScheme, Mode, Module, RecurrentConvUnit,
    RecurrentResidualUnit, UpConv,
};
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Outcome of a single gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Gradient magnitude below which [`relative_error`] measures against this
/// floor instead: finite differences in `f64` cannot resolve smaller
/// components to a relative precision.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Relative error with denominator `max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got {}",
            value.shape()
        )));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "function value is not finite ({v})"
        )));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// `(f(x + step) - f(x - step)) / (2 step)` for every element.
pub fn grad_check_detailed<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !x.all_finite() {
        return Err(Error::Evaluation(
            "gradient check input is not finite".into(),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(
            "gradient check needs a scalar function".into(),
        ));
    }
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "function value is not finite ({v})"
        )));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let mut worst = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_relative_error || i == 0 {
            worst = GradCheck {
                max_relative_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(worst)
}

/// Maximum relative error between the analytic and central-difference gradient.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_detailed(f, x, step).map(|c| c.max_relative_error)
}

/// Worst element of a multi-tensor check.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub error: f64,
    /// `input[i][j]` or `param_name[j]`.
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements re-probed with a small step because of a nearby kink.
    pub kinks: usize,
    /// Elements compared.
    pub checked: usize,
}

impl Worst {
    fn none() -> Self {
        Worst {
            error: 0.0,
            location: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            kinks: 0,
            checked: 0,
        }
    }

    fn offer(&mut self, location: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let error = relative_error(analytic, numeric);
        if error > self.error || self.location.is_empty() {
            self.error = error;
            self.location = location();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

type BlockFn<'a, M> = dyn Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Vec<Var>> + 'a;

/// Projects the outputs of a block onto a scalar. Scalar outputs pass
/// through; larger ones are contracted with fixed random weights, so that
/// maps whose plain sum is constant (batch norm) are still checked.
struct Objective {
    weights: Vec<Option<Tensor<f64>>>,
}

impl Objective {
    fn new(shapes: &[Shape], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b1e);
        let weights = shapes
            .iter()
            .map(|&s| {
                (s.numel() > 1).then(|| Tensor::from_fn(s, |_| StandardNormal.sample(&mut rng)))
            })
            .collect();
        Objective { weights }
    }

    fn apply(&self, tape: &mut Tape<f64>, outs: &[Var]) -> Result<Var> {
        if outs.len() != self.weights.len() {
            return Err(Error::Shape("block changed its number of outputs".into()));
        }
        let mut total: Option<Var> = None;
        for (&o, w) in outs.iter().zip(&self.weights) {
            let term = match w {
                Some(w) => {
                    let wv = tape.constant(w.clone());
                    let prod = tape.mul(o, wv)?;
                    tape.sum(prod)
                }
                None => tape.sum(o),
            };
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::Argument("block produced no outputs".into()))
    }
}

fn eval_block<M>(m: &M, inputs: &[Tensor<f64>], f: &BlockFn<M>, obj: &Objective) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let outs = f(m, &mut tape, &vars)?;
    let root = obj.apply(&mut tape, &outs)?;
    let v = tape.value(root).data()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "function value is not finite ({v})"
        )));
    }
    Ok(v)
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 + 1e-6 * a.abs().max(b.abs())
}

/// Numerical derivative from offsets `at(d)` of the function.
///
/// The primary estimate is the fourth-order stencil
/// `(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`, accepted when a plain central
/// difference at `h / 3` agrees with it. Disagreement means a kink (ReLU,
/// max-pool switch) lies within `2h`; the estimate then falls back to
/// central differences at `h / 10` or, if that one is also disturbed,
/// `h / 100`. The second value reports whether a fallback was taken.
fn derivative(h: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<(f64, bool)> {
    let central = |at: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> {
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    };
    let d1 = central(&mut at, h)?;
    let d2 = central(&mut at, 2.0 * h)?;
    let five = (4.0 * d1 - d2) / 3.0;
    if agree(five, central(&mut at, h / 3.0)?) {
        return Ok((five, false));
    }
    let fine = central(&mut at, h / 10.0)?;
    let finer = central(&mut at, h / 100.0)?;
    Ok((if agree(fine, finer) { fine } else { finer }, true))
}

/// Reads element `j` of the `k`-th trainable parameter, optionally
/// overwriting it; returns the previous value.
fn element<M: Module<f64>>(m: &mut M, k: usize, j: usize, set: Option<f64>) -> f64 {
    let (mut i, mut old) = (0, f64::NAN);
    m.visit_mut(&mut |p| {
        if p.trainable {
            if i == k {
                let slot = &mut p.value.data_mut()[j];
                old = *slot;
                if let Some(v) = set {
                    *slot = v;
                }
            }
            i += 1;
        }
    });
    old
}

/// Checks the gradient of a module's (weighted) outputs with respect to
/// every input element and every trainable parameter element.
pub fn check_block<M: Module<f64> + Clone>(
    module: &M,
    inputs: &[Tensor<f64>],
    f: &BlockFn<M>,
    step: f64,
    seed: u64,
) -> Result<Worst> {
    if inputs.iter().any(|x| !x.all_finite()) {
        return Err(Error::Evaluation(
            "gradient check input is not finite".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let outs = f(module, &mut tape, &vars)?;
    let shapes: Vec<Shape> = outs.iter().map(|&o| tape.shape(o)).collect();
    let obj = Objective::new(&shapes, seed);
    let root = obj.apply(&mut tape, &outs)?;
    let grads = tape.backward(root)?;

    let mut worst = Worst::none();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let zeros = vec![0.0; x.len()];
        let analytic = grads.wrt(v).unwrap_or(&zeros);
        for j in 0..x.len() {
            let orig = x.data()[j];
            let (numeric, kink) = derivative(step, |d| {
                probe[i].data_mut()[j] = orig + d;
                eval_block(module, &probe, f, &obj)
            })?;
            probe[i].data_mut()[j] = orig;
            worst.kinks += kink as usize;
            worst.offer(|| format!("input{i}[{j}]"), analytic[j], numeric);
        }
    }

    let mut params: Vec<(String, usize)> = Vec::new();
    module.visit(&mut |p| {
        if p.trainable {
            params.push((p.name.clone(), p.value.len()));
        }
    });
    let mut m = module.clone();
    for (k, (name, len)) in params.iter().enumerate() {
        let zeros = vec![0.0; *len];
        let analytic = grads.param(name).unwrap_or(&zeros);
        for j in 0..*len {
            let orig = element(&mut m, k, j, None);
            let (numeric, kink) = derivative(step, |d| {
                element(&mut m, k, j, Some(orig + d));
                eval_block(&m, inputs, f, &obj)
            })?;
            element(&mut m, k, j, Some(orig));
            worst.kinks += kink as usize;
            worst.offer(|| format!("{name}[{j}]"), analytic[j], numeric);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------

/// Settings of the full gradient suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    /// Depth of the end-to-end model.
    pub depth: usize,
    pub base_channels: usize,
    /// Side length of the end-to-end model input.
    pub size: usize,
    pub step: f64,
    pub block_tolerance: f64,
    pub model_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: (0..10).collect(),
            depth: 2,
            base_channels: 2,
            size: 16,
            step: 1e-4,
            block_tolerance: 1e-5,
            model_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub check: &'static str,
    pub seed: u64,
    pub worst: Worst,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.worst.error < self.tolerance
    }

    pub fn report_line(&self) -> String {
        format!(
            "{:<16} seed {:>3}  max rel err {:.3e}  (tol {:.0e}, {} elements, {} kinks, worst {})  {}",
            self.check,
            self.seed,
            self.worst.error,
            self.tolerance,
            self.worst.checked,
            self.worst.kinks,
            self.worst.location,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Names of every check, in execution order.
pub const SUITE_CHECKS: [&str; 14] = [
    "conv2d",
    "conv_transpose",
    "maxpool",
    "batch_norm",
    "recurrent_unit",
    "residual_unit",
    "attention_gate",
    "model",
    "loss_wbce",
    "loss_dice",
    "loss_bce_dice",
    "loss_tversky",
    "loss_focal",
    "loss_focal_g2",
];

fn normal(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Probabilities away from the clip bounds and a binary target holding both
/// classes.
fn loss_instance(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let n = rng.random_range(8..=64);
    let shape = Shape::new(1, 1, 1, n);
    let p = Tensor::from_fn(shape, |_| rng.random_range(0.02..0.98));
    let mut g: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect();
    g[0] = 1.0;
    g[n - 1] = 0.0;
    (p, Tensor::from_vec(shape, g).expect("length matches"))
}

/// A dummy module for checks without parameters.
#[derive(Clone)]
struct NoParams;

impl Module<f64> for NoParams {
    fn visit(&self, _: &mut dyn FnMut(&crate::nn::Param<f64>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut crate::nn::Param<f64>)) {}
}

fn run_check(name: &str, seed: u64, cfg: &SuiteConfig) -> Result<Worst> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9)
            .wrapping_add(name.len() as u64),
    );
    let h = cfg.step;
    let init = InitScheme::HeRelu;
    let loss = |cfg_l: LossConfig, rng: &mut ChaCha8Rng| -> Result<Worst> {
        let (p, g) = loss_instance(rng);
        let f =
            move |_: &NoParams, t: &mut Tape<f64>, v: &[Var]| Ok(vec![cfg_l.build(t, v[0], &g)?]);
        check_block(&NoParams, &[p], &f, h, seed)
    };
    match name {
        "conv2d" => {
            let m = Conv2d::<f64>::new("conv", 2, 3, 3, true, 2.0, &mut rng)?;
            let x = normal(Shape::new(2, 2, 5, 6), &mut rng);
            check_block(&m, &[x], &|m, t, v| Ok(vec![m.forward(t, v[0])?]), h, seed)
        }
        "conv_transpose" => {
            let m = UpConv::<f64>::new("up", 3, 2, 1.0, &mut rng)?;
            let x = normal(Shape::new(2, 3, 3, 4), &mut rng);
            check_block(&m, &[x], &|m, t, v| Ok(vec![m.forward(t, v[0])?]), h, seed)
        }
        "maxpool" => {
            let x = normal(Shape::new(2, 2, 6, 6), &mut rng);
            check_block(
                &NoParams,
                &[x],
                &|_, t, v| Ok(vec![t.maxpool2d(v[0])?]),
                h,
                seed,
            )
        }
        "batch_norm" => {
            let mut m = BatchNorm::<f64>::new("bn", 3);
            m.scale.value = normal(m.scale.value.shape(), &mut rng).map(|v| 1.0 + 0.3 * v);
            m.shift.value = normal(m.shift.value.shape(), &mut rng);
            let x = normal(Shape::new(3, 3, 3, 3), &mut rng);
            check_block(
                &m,
                &[x],
                &|m, t, v| Ok(vec![m.forward(t, v[0], Mode::Train)?]),
                h,
                seed,
            )
        }
        "recurrent_unit" => {
            let m = RecurrentConvUnit::<f64>::new("rcu", 2, 3, 2, init, &mut rng)?;
            let x = normal(Shape::new(2, 2, 5, 5), &mut rng);
            check_block(
                &m,
                &[x],
                &|m, t, v| Ok(vec![m.forward(t, v[0], Mode::Train)?]),
                h,
                seed,
            )
        }
        "residual_unit" => {
            let m = RecurrentResidualUnit::<f64>::new("rru", 2, 3, 2, init, &mut rng)?;
            let x = normal(Shape::new(2, 2, 5, 5), &mut rng);
            check_block(
                &m,
                &[x],
                &|m, t, v| Ok(vec![m.forward(t, v[0], Mode::Train)?]),
                h,
                seed,
            )
        }
        "attention_gate" => {
            let mut m = AttentionGate::<f64>::new("ag", 3, 4, 2, init, &mut rng)?;
            m.b_g.value = normal(m.b_g.value.shape(), &mut rng);
            m.b_psi.value = normal(m.b_psi.value.shape(), &mut rng);
            let enc = normal(Shape::new(2, 3, 4, 4), &mut rng);
            let dec = normal(Shape::new(2, 4, 4, 4), &mut rng);
            check_block(
                &m,
                &[enc, dec],
                &|m, t, v| {
                    let (gated, alpha) = m.forward(t, v[0], v[1])?;
                    Ok(vec![gated, alpha])
                },
                h,
                seed,
            )
        }
        "model" => {
            let mc = ModelConfig {
                depth: cfg.depth,
                base_channels: cfg.base_channels,
                ..ModelConfig::default()
            }
            .with_size(cfg.size, cfg.size);
            let m = R2AUNet::<f64>::build(&mc, seed)?;
            let x = normal(m.input_shape(2), &mut rng);
            check_block(
                &m,
                &[x],
                &|m, t, v| Ok(vec![m.forward(t, v[0], Mode::Train)?]),
                h,
                seed,
            )
        }
        "loss_wbce" => loss(LossConfig::wbce(0.3), &mut rng),
        "loss_dice" => loss(LossConfig::dice(), &mut rng),
        "loss_bce_dice" => loss(LossConfig::bce_dice(), &mut rng),
        "loss_tversky" => loss(LossConfig::tversky(0.3, 0.7), &mut rng),
        "loss_focal" => loss(LossConfig::focal_tversky(0.3, 0.7, 0.75), &mut rng),
        "loss_focal_g2" => loss(LossConfig::focal_tversky(0.7, 0.3, 2.0), &mut rng),
        other => Err(Error::Argument(format!("unknown gradient check `{other}`"))),
    }
}

/// Runs every check for every seed, reporting each entry as it finishes.
pub fn run_suite(
    cfg: &SuiteConfig,
    mut on_entry: impl FnMut(&SuiteEntry),
) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for &check in &SUITE_CHECKS {
        let tolerance = if check == "model" {
            cfg.model_tolerance
        } else {
            cfg.block_tolerance
        };
        for &seed in &cfg.seeds {
            let start = Instant::now();
            let worst = run_check(check, seed, cfg)?;
            let entry = SuiteEntry {
                check,
                seed,
                worst,
                tolerance,
                elapsed: start.elapsed(),
            };
            on_entry(&entry);
            out.push(entry);
        }
    }
    Ok(out)
}
