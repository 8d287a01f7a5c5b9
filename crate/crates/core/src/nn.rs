//! Composite layers: batch normalization, the recurrent convolution unit and
//! its residual form, the additive attention gate, and He initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::conv::{ConvSpec, Padding};
use crate::tensor::num_like::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named state tensor. Non-trainable entries (running statistics) are
/// persisted in checkpoints but never handed to the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: false,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = tape.param_var(&self.name) {
            return v;
        }
        if self.trainable {
            tape.param(&self.name, &self.value)
        } else {
            tape.constant(self.value.clone())
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            trainable: self.trainable,
        }
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    fn visit_bn_mut(&mut self, _f: &mut dyn FnMut(&mut BatchNorm<T>)) {}

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// Folds the batch statistics recorded on `tape` into the running
    /// estimates, in the order they were observed.
    fn commit_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        self.visit_bn_mut(&mut |bn| {
            let key = bn.key.clone();
            for s in stats.iter().filter(|s| s.key == key) {
                bn.update_running(s);
            }
        });
    }
}

/// Weight initialization policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `2/sqrt(N)` for every convolution.
    He,
    /// `2/sqrt(N)` for convolutions followed by a ReLU, `1/sqrt(N)` for the
    /// linear ones (projections, transposed convolutions, gate and head).
    #[default]
    HeRelu,
}

impl InitScheme {
    /// Standard-deviation numerator for a convolution.
    pub fn gain(self, feeds_relu: bool) -> f64 {
        match (self, feeds_relu) {
            (InitScheme::HeRelu, false) => 1.0,
            _ => 2.0,
        }
    }
}

/// i.i.d. `N(0, (gain/sqrt(fan_in))^2)`.
pub fn scaled_normal_with<T: Scalar, R: Rng + ?Sized>(
    shape: Shape,
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Argument("fan-in must be positive".into()));
    }
    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt())
        .map_err(|e| Error::Argument(e.to_string()))?;
    Ok(Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng))))
}

/// He initialization: i.i.d. `N(0, (2/sqrt(fan_in))^2)`.
pub fn he_init_with<T: Scalar, R: Rng + ?Sized>(
    shape: Shape,
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    scaled_normal_with(shape, fan_in, 2.0, rng)
}

pub fn he_init<T: Scalar>(shape: Shape, fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    he_init_with(shape, fan_in, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn channel_vec<T: Scalar>(c: usize, v: f64) -> Tensor<T> {
    Tensor::full(Shape::new(1, c, 1, 1), T::from_f64(v))
}

// ---------------------------------------------------------------------------

/// Batch normalization with learnable per-channel scale and shift.
///
/// Running statistics are kept per slot, shape `(slots, C, 1, 1)`, so a
/// layer reused across recurrent timesteps can share its scale and shift
/// while remembering each timestep's population statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub key: String,
    /// Scale (lambda).
    pub scale: Param<T>,
    /// Shift (beta_bn).
    pub shift: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(key: &str, channels: usize) -> Self {
        Self::with_slots(key, channels, 1)
    }

    pub fn with_slots(key: &str, channels: usize, slots: usize) -> Self {
        let stats = |v: f64| Tensor::full(Shape::new(slots.max(1), channels, 1, 1), T::from_f64(v));
        BatchNorm {
            key: key.to_owned(),
            scale: Param::new(format!("{key}.scale"), channel_vec(channels, 1.0)),
            shift: Param::new(format!("{key}.shift"), channel_vec(channels, 0.0)),
            running_mean: Param::buffer(format!("{key}.running_mean"), stats(0.0)),
            running_var: Param::buffer(format!("{key}.running_var"), stats(1.0)),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    pub fn slots(&self) -> usize {
        self.running_mean.value.shape().n
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_slot(tape, x, mode, 0)
    }

    pub fn forward_slot(&self, tape: &mut Tape<T>, x: Var, mode: Mode, slot: usize) -> Result<Var> {
        if slot >= self.slots() {
            return Err(Error::Argument(format!(
                "batch norm `{}` has {} statistics slots, asked for {slot}",
                self.key,
                self.slots()
            )));
        }
        if tape.shape(x).c != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm `{}` has {} channels, input is {}",
                self.key,
                self.channels(),
                tape.shape(x)
            )));
        }
        let g = self.scale.bind(tape);
        let b = self.shift.bind(tape);
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, g, b, eps)?;
                tape.record_batch_stats(BatchStats {
                    key: self.key.clone(),
                    slot,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let c = self.channels();
                let r = slot * c..(slot + 1) * c;
                tape.batch_norm_frozen(
                    x,
                    g,
                    b,
                    &self.running_mean.value.data()[r.clone()],
                    &self.running_var.value.data()[r],
                    eps,
                )
            }
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let one_m = T::ONE - m;
        let c = self.channels();
        let r = stats.slot * c..(stats.slot + 1) * c;
        for (r, &s) in self.running_mean.value.data_mut()[r.clone()]
            .iter_mut()
            .zip(&stats.mean)
        {
            *r = m * *r + one_m * s;
        }
        for (r, &s) in self.running_var.value.data_mut()[r]
            .iter_mut()
            .zip(&stats.var)
        {
            *r = m * *r + one_m * s;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.scale);
        f(&self.shift);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.scale);
        f(&mut self.shift);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(self)
    }
}

// ---------------------------------------------------------------------------

/// Convolution with an optional per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Shape::new(out_ch, in_ch, kernel, kernel);
        let weight = scaled_normal_with(shape, in_ch * kernel * kernel, gain, rng)?;
        Ok(Conv2d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Param::new(format!("{name}.bias"), channel_vec(out_ch, 0.0))),
            spec: ConvSpec::same(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let y = tape.conv2d(x, w, self.spec)?;
        match &self.bias {
            Some(b) => {
                let b = b.bind(tape);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Stride-2 2x2 transposed convolution with bias; doubles spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct UpConv<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> UpConv<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Shape::new(in_ch, out_ch, 2, 2);
        // each output pixel sees exactly one 2x2 tap per input channel
        Ok(UpConv {
            weight: Param::new(
                format!("{name}.weight"),
                scaled_normal_with(shape, in_ch, gain, rng)?,
            ),
            bias: Param::new(format!("{name}.bias"), channel_vec(out_ch, 0.0)),
            spec: ConvSpec::strided(2, Padding::Valid),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        let y = tape.conv2d_transpose(x, w, self.spec)?;
        tape.add_bias(y, b)
    }
}

impl<T: Scalar> Module<T> for UpConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

// ---------------------------------------------------------------------------

/// Convolution unit unrolled over `timesteps` recurrent steps:
///
/// ```text
/// p(0) = BN(ReLU(theta_g * x + b))
/// p(t) = BN(ReLU(theta_g * x + theta_r * p(t-1) + b)),  t = 1..=T
/// ```
///
/// The feed-forward response `theta_g * x` is computed once and reused, and a
/// single batch norm is shared by every step.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentConvUnit<T: Scalar> {
    pub theta_g: Conv2d<T>,
    pub theta_r: Conv2d<T>,
    pub bias: Param<T>,
    pub timesteps: usize,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> RecurrentConvUnit<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        timesteps: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Argument(
                "recurrent unit needs at least one timestep".into(),
            ));
        }
        Ok(RecurrentConvUnit {
            theta_g: Conv2d::new(
                &format!("{name}.theta_g"),
                in_ch,
                out_ch,
                3,
                false,
                init.gain(true),
                rng,
            )?,
            theta_r: Conv2d::new(
                &format!("{name}.theta_r"),
                out_ch,
                out_ch,
                3,
                false,
                init.gain(true),
                rng,
            )?,
            bias: Param::new(format!("{name}.bias"), channel_vec(out_ch, 0.0)),
            timesteps,
            bn: BatchNorm::with_slots(&format!("{name}.bn"), out_ch, timesteps + 1),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.theta_g.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.theta_g.out_channels()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        if tape.shape(x).c != self.in_channels() {
            return Err(Error::Shape(format!(
                "recurrent unit expects {} input channels, got {}",
                self.in_channels(),
                tape.shape(x)
            )));
        }
        let b = self.bias.bind(tape);
        let feed = self.theta_g.forward(tape, x)?;
        let z = tape.add_bias(feed, b)?;
        let a = tape.relu(z);
        let mut p = self.bn.forward_slot(tape, a, mode, 0)?;
        for t in 1..=self.timesteps {
            let rec = self.theta_r.forward(tape, p)?;
            let z = tape.add(feed, rec)?;
            let z = tape.add_bias(z, b)?;
            let a = tape.relu(z);
            p = self.bn.forward_slot(tape, a, mode, t)?;
        }
        Ok(p)
    }
}

impl<T: Scalar> Module<T> for RecurrentConvUnit<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.theta_g.visit(f);
        self.theta_r.visit(f);
        f(&self.bias);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.theta_g.visit_mut(f);
        self.theta_r.visit_mut(f);
        f(&mut self.bias);
        self.bn.visit_mut(f);
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(&mut self.bn)
    }
}

/// `skip(x) + RecurrentConvUnit(x)`, where `skip` is the identity or a 1x1
/// projection when channel counts differ.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentResidualUnit<T: Scalar> {
    pub inner: RecurrentConvUnit<T>,
    pub proj: Option<Conv2d<T>>,
}

impl<T: Scalar> RecurrentResidualUnit<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        timesteps: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = RecurrentConvUnit::new(name, in_ch, out_ch, timesteps, init, rng)?;
        let proj = if in_ch != out_ch {
            Some(Conv2d::new(
                &format!("{name}.proj"),
                in_ch,
                out_ch,
                1,
                true,
                init.gain(false),
                rng,
            )?)
        } else {
            None
        };
        Ok(RecurrentResidualUnit { inner, proj })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let xs = tape.shape(x);
        let skip = match &self.proj {
            Some(p) => p.forward(tape, x)?,
            None if xs.c == self.inner.out_channels() => x,
            None => {
                return Err(Error::Shape(format!(
                    "residual unit maps {} -> {} channels but has no projection",
                    xs.c,
                    self.inner.out_channels()
                )))
            }
        };
        let branch = self.inner.forward(tape, x, mode)?;
        tape.add(skip, branch)
    }
}

impl<T: Scalar> Module<T> for RecurrentResidualUnit<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.inner.visit(f);
        if let Some(p) = &self.proj {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.inner.visit_mut(f);
        if let Some(p) = &mut self.proj {
            p.visit_mut(f);
        }
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        self.inner.visit_bn_mut(f)
    }
}

// ---------------------------------------------------------------------------

/// Additive attention gate:
///
/// ```text
/// q     = psi * tanh(U_att * s + W_att * h + b_g) + b_psi
/// alpha = sigmoid(q)             (one map, shared across h's channels)
/// out   = h * alpha
/// ```
///
/// `h` is the encoder skip tensor and `s` the decoder state at the same
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGate<T: Scalar> {
    pub w_att: Conv2d<T>,
    pub u_att: Conv2d<T>,
    pub b_g: Param<T>,
    pub psi: Conv2d<T>,
    pub b_psi: Param<T>,
}

impl<T: Scalar> AttentionGate<T> {
    /// Intermediate width: half the encoder feature count, at least 1.
    pub fn default_width(encoder_channels: usize) -> usize {
        (encoder_channels / 2).max(1)
    }

    pub fn new<R: Rng + ?Sized>(
        name: &str,
        encoder_ch: usize,
        decoder_ch: usize,
        width: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let g = init.gain(false);
        Ok(AttentionGate {
            w_att: Conv2d::new(
                &format!("{name}.w_att"),
                encoder_ch,
                width,
                1,
                false,
                g,
                rng,
            )?,
            u_att: Conv2d::new(
                &format!("{name}.u_att"),
                decoder_ch,
                width,
                1,
                false,
                g,
                rng,
            )?,
            b_g: Param::new(format!("{name}.b_g"), channel_vec(width, 0.0)),
            psi: Conv2d::new(&format!("{name}.psi"), width, 1, 1, false, g, rng)?,
            b_psi: Param::new(format!("{name}.b_psi"), channel_vec(1, 0.0)),
        })
    }

    /// Returns `(gated, alpha)`.
    pub fn forward(&self, tape: &mut Tape<T>, h: Var, s: Var) -> Result<(Var, Var)> {
        let (hs, ss) = (tape.shape(h), tape.shape(s));
        if (hs.n, hs.h, hs.w) != (ss.n, ss.h, ss.w) {
            return Err(Error::Shape(format!(
                "attention gate inputs {hs} and {ss} are misaligned"
            )));
        }
        let us = self.u_att.forward(tape, s)?;
        let wh = self.w_att.forward(tape, h)?;
        let sum = tape.add(us, wh)?;
        let bg = self.b_g.bind(tape);
        let sum = tape.add_bias(sum, bg)?;
        let act = tape.tanh(sum);
        let q = self.psi.forward(tape, act)?;
        let bpsi = self.b_psi.bind(tape);
        let q = tape.add_bias(q, bpsi)?;
        let alpha = tape.sigmoid(q);
        let gated = tape.gate(h, alpha)?;
        Ok((gated, alpha))
    }
}

impl<T: Scalar> Module<T> for AttentionGate<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.w_att.visit(f);
        self.u_att.visit(f);
        f(&self.b_g);
        self.psi.visit(f);
        f(&self.b_psi);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.w_att.visit_mut(f);
        self.u_att.visit_mut(f);
        f(&mut self.b_g);
        self.psi.visit_mut(f);
        f(&mut self.b_psi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn zero_params<T: Scalar>(m: &mut impl Module<T>) {
        m.visit_mut(&mut |p| {
            if p.trainable && !p.name.ends_with(".scale") {
                p.value.data_mut().fill(T::ZERO);
            }
        });
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-2.0..2.0))
    }

    #[test]
    fn bn_constant_input_gives_shift() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        bn.shift.value.data_mut().copy_from_slice(&[0.25, -1.5]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(2, 2, 3, 3), 4.0));
        let y = bn.forward(&mut tape, x, Mode::Train).unwrap();
        let out = tape.value(y);
        for n in 0..2 {
            for h in 0..3 {
                assert!((out.at(n, 0, h, 1) - 0.25).abs() < 1e-12);
                assert!((out.at(n, 1, h, 1) + 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bn_train_normalizes_per_channel() {
        let bn = BatchNorm::<f64>::new("bn", 3);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(Shape::new(4, 3, 5, 5), 3).map(|v| 3.0 * v + 1.0));
        let y = bn.forward(&mut tape, x, Mode::Train).unwrap();
        let out = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| out.at(n, c, i / 5, i % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "{mean}");
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn bn_channel_mismatch_and_tiny_batch() {
        let bn = BatchNorm::<f64>::new("bn", 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(
            bn.forward(&mut tape, x, Mode::Train),
            Err(Error::Shape(_))
        ));
        let bn = BatchNorm::<f64>::new("bn1", 1);
        let single = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(bn.forward(&mut tape, single, Mode::Train).is_err());
        assert!(bn.forward(&mut tape, single, Mode::Eval).is_ok());
    }

    #[test]
    fn bn_running_stats_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        bn.forward(&mut tape, x, Mode::Train).unwrap();
        bn.commit_batch_stats(tape.batch_stats());
        assert!((bn.running_mean.value.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.value.data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn bn_slots_keep_separate_statistics() {
        let mut bn = BatchNorm::<f64>::with_slots("bn", 1, 2);
        assert_eq!(bn.running_mean.value.shape(), Shape::new(2, 1, 1, 1));
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![10.0, 10.0]).unwrap());
        bn.forward_slot(&mut tape, a, Mode::Train, 0).unwrap();
        bn.forward_slot(&mut tape, b, Mode::Train, 1).unwrap();
        assert!(bn.forward_slot(&mut tape, b, Mode::Train, 2).is_err());
        bn.commit_batch_stats(tape.batch_stats());
        let mean = bn.running_mean.value.data();
        assert!(
            (mean[0] - 0.2).abs() < 1e-12 && (mean[1] - 1.0).abs() < 1e-12,
            "{mean:?}"
        );

        // eval mode normalizes with the slot's own statistics
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let y0 = bn.forward_slot(&mut tape, x, Mode::Eval, 0).unwrap();
        let y1 = bn.forward_slot(&mut tape, x, Mode::Eval, 1).unwrap();
        let var1 = bn.running_var.value.data()[1];
        assert!((tape.value(y0).data()[0] - 0.8 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((tape.value(y1).data()[0] - 0.0 / (var1 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rcu_with_zero_recurrent_kernel_ignores_timesteps() {
        let x = random_input(Shape::new(2, 2, 6, 6), 11);
        let mut outs = Vec::new();
        for t in [1, 2, 4] {
            let mut unit =
                RecurrentConvUnit::<f64>::new("u", 2, 3, t, InitScheme::He, &mut rng()).unwrap();
            unit.theta_r.weight.value.data_mut().fill(0.0);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = unit.forward(&mut tape, xv, Mode::Train).unwrap();
            outs.push(tape.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn rcu_single_step_matches_manual_composition() {
        let unit = RecurrentConvUnit::<f64>::new("u", 2, 3, 1, InitScheme::He, &mut rng()).unwrap();
        let x = random_input(Shape::new(2, 2, 5, 5), 5);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = unit.forward(&mut tape, xv, Mode::Train).unwrap();
        let got = tape.value(y).clone();

        // BN(ReLU(g*x + b)) followed by one recurrent step, built by hand
        let mut t2 = Tape::new();
        let xv = t2.constant(x);
        let bn = BatchNorm::<f64>::new("other", 3);
        let feed = unit.theta_g.forward(&mut t2, xv).unwrap();
        let plain = t2.relu(feed);
        let p0 = bn.forward(&mut t2, plain, Mode::Train).unwrap();
        let rec = unit.theta_r.forward(&mut t2, p0).unwrap();
        let z = t2.add(feed, rec).unwrap();
        let a = t2.relu(z);
        let p1 = bn.forward(&mut t2, a, Mode::Train).unwrap();
        let want = t2.value(p1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut unit =
            RecurrentResidualUnit::<f64>::new("r", 3, 3, 2, InitScheme::He, &mut rng()).unwrap();
        zero_params(&mut unit);
        let x = random_input(Shape::new(2, 3, 4, 4), 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = unit.forward(&mut tape, xv, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn residual_minus_branch_is_input() {
        let unit =
            RecurrentResidualUnit::<f64>::new("r", 3, 3, 2, InitScheme::He, &mut rng()).unwrap();
        let x = random_input(Shape::new(2, 3, 4, 4), 9);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = unit.forward(&mut tape, xv, Mode::Train).unwrap();
        let branch = unit.inner.forward(&mut tape, xv, Mode::Train).unwrap();
        let diff = tape.sub(y, branch).unwrap();
        for (a, b) in tape.value(diff).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_without_projection_rejects_channel_change() {
        let mut unit =
            RecurrentResidualUnit::<f64>::new("r", 2, 3, 1, InitScheme::He, &mut rng()).unwrap();
        unit.proj = None;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        assert!(matches!(
            unit.forward(&mut tape, x, Mode::Train),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_gate_halves_features() {
        let mut gate = AttentionGate::<f64>::new("g", 4, 4, 2, InitScheme::He, &mut rng()).unwrap();
        zero_params(&mut gate);
        let h = random_input(Shape::new(1, 4, 3, 3), 1);
        let s = random_input(Shape::new(1, 4, 3, 3), 2);
        let mut tape = Tape::new();
        let (hv, sv) = (tape.constant(h.clone()), tape.constant(s));
        let (gated, alpha) = gate.forward(&mut tape, hv, sv).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&a| a == 0.5));
        for (g, x) in tape.value(gated).data().iter().zip(h.data()) {
            assert_eq!(*g, 0.5 * x);
        }
    }

    #[test]
    fn saturated_gate_passes_features() {
        let mut gate = AttentionGate::<f64>::new("g", 2, 3, 1, InitScheme::He, &mut rng()).unwrap();
        gate.psi.weight.value.data_mut().fill(0.0);
        gate.b_psi.value.data_mut()[0] = 20.0;
        let h = random_input(Shape::new(1, 2, 3, 3), 4);
        let s = random_input(Shape::new(1, 3, 3, 3), 5);
        let mut tape = Tape::new();
        let (hv, sv) = (tape.constant(h.clone()), tape.constant(s));
        let (gated, _) = gate.forward(&mut tape, hv, sv).unwrap();
        for (g, x) in tape.value(gated).data().iter().zip(h.data()) {
            assert!((g - x).abs() < 1e-8 * x.abs().max(1.0));
        }
    }

    #[test]
    fn gate_rejects_spatial_mismatch() {
        let gate = AttentionGate::<f64>::new("g", 2, 2, 1, InitScheme::He, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let s = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(
            gate.forward(&mut tape, h, s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn he_init_is_seeded_and_scaled() {
        let a = he_init::<f64>(Shape::new(1, 1, 1000, 1000), 4, 42).unwrap();
        let b = he_init::<f64>(Shape::new(1, 1, 1000, 1000), 4, 42).unwrap();
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let std = (a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((std - 1.0).abs() < 0.02, "{std}");
        assert!(matches!(
            he_init::<f64>(Shape::SCALAR, 0, 1),
            Err(Error::Argument(_))
        ));
    }
}
