//! The recurrent residual attention U-Net and its ablation variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::nn::{
    AttentionGate, BatchNorm, Conv2d, InitScheme, Mode, Module, Param, RecurrentConvUnit,
    RecurrentResidualUnit, UpConv,
};
use crate::tensor::num_like::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

fn default_depth() -> usize {
    4
}
fn default_base() -> usize {
    16
}
fn default_timesteps() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_size() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of pooling stages.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_true")]
    pub use_attention: bool,
    #[serde(default = "default_true")]
    pub use_residual: bool,
    /// Gate the shallowest skip connection as well.
    #[serde(default)]
    pub attend_first_skip: bool,
    #[serde(default = "default_one")]
    pub in_channels: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: default_depth(),
            base_channels: default_base(),
            timesteps: default_timesteps(),
            use_attention: true,
            use_residual: true,
            attend_first_skip: false,
            in_channels: 1,
            height: default_size(),
            width: default_size(),
            init: InitScheme::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.depth >= usize::BITS as usize - 1 {
            return bad(format!("depth {} is too large", self.depth));
        }
        let unit = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0
        {
            return bad(format!(
                "input {}x{} must be a nonzero multiple of 2^depth = {unit}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    /// Output channels of encoder stage `k`; `k == depth` is the bottleneck.
    pub fn channels_at(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Human-readable name of the architecture variant.
    pub fn variant_name(&self) -> &'static str {
        match (self.use_residual, self.use_attention) {
            (true, true) => "Recurrent Residual UNET + Attention",
            (false, true) => "Recurrent UNET + Attention",
            (true, false) => "Recurrent Residual UNET",
            (false, false) => "Recurrent UNET",
        }
    }

    pub fn gated_skip(&self, level: usize) -> bool {
        self.use_attention && (level > 0 || self.attend_first_skip)
    }
}

/// A recurrent stage with or without the additive skip.
#[derive(Clone, Debug, PartialEq)]
pub enum Block<T: Scalar> {
    Recurrent(RecurrentConvUnit<T>),
    Residual(RecurrentResidualUnit<T>),
}

impl<T: Scalar> Block<T> {
    fn new(
        name: &str,
        cfg: &ModelConfig,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(if cfg.use_residual {
            Block::Residual(RecurrentResidualUnit::new(
                name,
                in_ch,
                out_ch,
                cfg.timesteps,
                cfg.init,
                rng,
            )?)
        } else {
            Block::Recurrent(RecurrentConvUnit::new(
                name,
                in_ch,
                out_ch,
                cfg.timesteps,
                cfg.init,
                rng,
            )?)
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Recurrent(u) => u.out_channels(),
            Block::Residual(u) => u.inner.out_channels(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Block::Recurrent(u) => u.forward(tape, x, mode),
            Block::Residual(u) => u.forward(tape, x, mode),
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Block::Recurrent(u) => u.visit(f),
            Block::Residual(u) => u.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Block::Recurrent(u) => u.visit_mut(f),
            Block::Residual(u) => u.visit_mut(f),
        }
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        match self {
            Block::Recurrent(u) => u.visit_bn_mut(f),
            Block::Residual(u) => u.visit_bn_mut(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage<T: Scalar> {
    pub up: UpConv<T>,
    pub gate: Option<AttentionGate<T>>,
    pub block: Block<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct R2AUNet<T: Scalar> {
    pub config: ModelConfig,
    pub encoders: Vec<Block<T>>,
    pub bottleneck: Block<T>,
    /// Indexed by level; `decoders[k]` consumes the skip from `encoders[k]`.
    pub decoders: Vec<DecoderStage<T>>,
    pub head: Conv2d<T>,
}

/// Everything produced by one forward pass.
pub struct ForwardOutput {
    pub probs: Var,
    /// Attention maps per gated level (shallow to deep; `None` where ungated).
    pub attention: Vec<Option<Var>>,
}

impl<T: Scalar> R2AUNet<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::with_capacity(config.depth);
        let mut in_ch = config.in_channels;
        for k in 0..config.depth {
            let out = config.channels_at(k);
            encoders.push(Block::new(
                &format!("enc{k}"),
                config,
                in_ch,
                out,
                &mut rng,
            )?);
            in_ch = out;
        }
        let bottleneck = Block::new(
            "bottleneck",
            config,
            in_ch,
            config.channels_at(config.depth),
            &mut rng,
        )?;
        let mut decoders = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let (deep, here) = (config.channels_at(k + 1), config.channels_at(k));
            let name = format!("dec{k}");
            let up = UpConv::new(
                &format!("{name}.up"),
                deep,
                here,
                config.init.gain(false),
                &mut rng,
            )?;
            let gate = if config.gated_skip(k) {
                let width = AttentionGate::<T>::default_width(here);
                Some(AttentionGate::new(
                    &format!("{name}.gate"),
                    here,
                    here,
                    width,
                    config.init,
                    &mut rng,
                )?)
            } else {
                None
            };
            let block = Block::new(&name, config, 2 * here, here, &mut rng)?;
            decoders.push(DecoderStage { up, gate, block });
        }
        let head = Conv2d::new(
            "head",
            config.base_channels,
            1,
            1,
            true,
            config.init.gain(false),
            &mut rng,
        )?;
        Ok(R2AUNet {
            config: config.clone(),
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(
            batch,
            self.config.in_channels,
            self.config.height,
            self.config.width,
        )
    }

    /// Records a forward pass on `tape`; returns the probability map and
    /// attention maps.
    pub fn forward_detailed(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let xs = tape.shape(x);
        let want = self.input_shape(xs.n);
        if xs != want || xs.n == 0 {
            return Err(Error::Shape(format!(
                "model expects input {want}, got {xs}"
            )));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for enc in &self.encoders {
            let e = enc.forward(tape, h, mode)?;
            skips.push(e);
            h = tape.maxpool2d(e)?;
        }
        h = self.bottleneck.forward(tape, h, mode)?;
        let mut attention = vec![None; self.config.depth];
        for k in (0..self.config.depth).rev() {
            let stage = &self.decoders[k];
            let up = stage.up.forward(tape, h)?;
            let skip = match &stage.gate {
                Some(g) => {
                    let (gated, alpha) = g.forward(tape, skips[k], up)?;
                    attention[k] = Some(alpha);
                    gated
                }
                None => skips[k],
            };
            let cat = tape.concat(skip, up)?;
            h = stage.block.forward(tape, cat, mode)?;
        }
        let logits = self.head.forward(tape, h)?;
        Ok(ForwardOutput {
            probs: tape.sigmoid(logits),
            attention,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_detailed(tape, x, mode).map(|o| o.probs)
    }

    /// Inference-mode probabilities for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict_mask(&self, x: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
        let probs = self.predict(x)?;
        binarize(&probs, threshold)
    }

    /// Copy of the named state tensor.
    pub fn param_value(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit(&mut |p| {
            if found.is_none() && p.name == name {
                found = Some(p.value.clone());
            }
        });
        found
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }

    /// Replaces the value of the named state tensor.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut result = Err(Error::Argument(format!("no parameter named `{name}`")));
        self.visit_mut(&mut |p| {
            if p.name == name {
                result = if p.value.shape() == value.shape() {
                    p.value = value.clone();
                    Ok(())
                } else {
                    Err(Error::Shape(format!(
                        "parameter `{name}` has shape {}, got {}",
                        p.value.shape(),
                        value.shape()
                    )))
                };
            }
        });
        result
    }

    pub fn cast<U: Scalar>(&self) -> R2AUNet<U> {
        let mut out = R2AUNet::<U>::build(&self.config, 0).expect("config already validated");
        let mut values = Vec::new();
        self.visit(&mut |p| values.push(p.value.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_mut(&mut |p| p.value = it.next().expect("identical layout"));
        out
    }
}

impl<T: Scalar> Module<T> for R2AUNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for e in &self.encoders {
            e.visit(f);
        }
        self.bottleneck.visit(f);
        for d in &self.decoders {
            d.up.visit(f);
            if let Some(g) = &d.gate {
                g.visit(f);
            }
            d.block.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for e in &mut self.encoders {
            e.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        for d in &mut self.decoders {
            d.up.visit_mut(f);
            if let Some(g) = &mut d.gate {
                g.visit_mut(f);
            }
            d.block.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        for e in &mut self.encoders {
            e.visit_bn_mut(f);
        }
        self.bottleneck.visit_bn_mut(f);
        for d in &mut self.decoders {
            d.block.visit_bn_mut(f);
        }
    }
}

/// Elementwise `p >= threshold` as a {0, 1} tensor.
pub fn binarize<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    Ok(probs.map(|p| {
        if p.to_f64() >= threshold {
            T::ONE
        } else {
            T::ZERO
        }
    }))
}
