//! The single-convolution classifier.
//!
//! ```text
//! x [in × T] → Conv1d(same, stride 1) → ReLU → dropout → mean over T → FC → softmax
//! ```
//!
//! The first layer needs no input gradient, so backprop stops at the
//! convolution weights.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Padded};

pub const DEFAULT_CHANNELS: usize = 59;
pub const DEFAULT_KERNEL: usize = 11;
pub const DEFAULT_CLASSES: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: DEFAULT_CHANNELS,
            out_channels: DEFAULT_CHANNELS,
            kernel: DEFAULT_KERNEL,
            classes: DEFAULT_CLASSES,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl ModelConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, classes: usize) -> Self {
        ModelConfig {
            in_channels,
            out_channels,
            kernel,
            classes,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.classes == 0
        {
            return Err(Error::invalid(format!("zero-size dimension in {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size {} is even; same padding needs an odd kernel",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Zero padding on each side of the time axis.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub conv: usize,
    pub fc: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.conv + self.fc
    }
}

/// All learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[out × in × kernel]`
    pub conv_weight: Array3<f64>,
    pub conv_bias: Array1<f64>,
    /// `[classes × out]`
    pub fc_weight: Array2<f64>,
    pub fc_bias: Array1<f64>,
}

/// Names of the parameter blocks in storage order.
pub const BLOCK_NAMES: [&str; 4] = ["conv_weight", "conv_bias", "fc_weight", "fc_bias"];

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            in_channels,
            out_channels,
            kernel,
            classes,
            ..
        } = config;
        Ok(ModelParams {
            config,
            conv_weight: Array3::zeros((out_channels, in_channels, kernel)),
            conv_bias: Array1::zeros(out_channels),
            fc_weight: Array2::zeros((classes, out_channels)),
            fc_bias: Array1::zeros(classes),
        })
    }

    /// Flat, row-major views of the four blocks in [`BLOCK_NAMES`] order.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            self.conv_weight.as_slice().expect("standard layout"),
            self.conv_bias.as_slice().expect("standard layout"),
            self.fc_weight.as_slice().expect("standard layout"),
            self.fc_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.conv_weight.as_slice_mut().expect("standard layout"),
            self.conv_bias.as_slice_mut().expect("standard layout"),
            self.fc_weight.as_slice_mut().expect("standard layout"),
            self.fc_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.config)
    }

    /// Sets the conv layer to pass input channel `o` straight to output `o`.
    /// Requires `in_channels == out_channels`.
    pub fn set_identity_conv(&mut self) -> Result<()> {
        let c = self.config;
        if c.in_channels != c.out_channels {
            return Err(Error::Shape(format!(
                "identity conv needs in == out channels, got {} and {}",
                c.in_channels, c.out_channels
            )));
        }
        self.conv_weight.fill(0.0);
        self.conv_bias.fill(0.0);
        for o in 0..c.out_channels {
            self.conv_weight[[o, o, c.padding()]] = 1.0;
        }
        Ok(())
    }
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let ModelConfig {
        in_channels: i,
        out_channels: o,
        kernel: k,
        classes: c,
        ..
    } = *config;
    ParamCount {
        conv: o * i * k + o,
        fc: c * o + c,
    }
}

/// Uniform `[-1/√fan_in, 1/√fan_in]` weights and zero biases.
pub fn init_params(seed: u64, config: ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv_bound = 1.0 / ((config.in_channels * config.kernel) as f64).sqrt();
    let fc_bound = 1.0 / (config.out_channels as f64).sqrt();
    params
        .conv_weight
        .mapv_inplace(|_| rng.random_range(-conv_bound..=conv_bound));
    params
        .fc_weight
        .mapv_inplace(|_| rng.random_range(-fc_bound..=fc_bound));
    Ok(params)
}

/// Gradients, or any other per-parameter quantity with the model's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv_weight: Array3<f64>,
    pub conv_bias: Array1<f64>,
    pub fc_weight: Array2<f64>,
    pub fc_bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Gradients {
            conv_weight: Array3::zeros((config.out_channels, config.in_channels, config.kernel)),
            conv_bias: Array1::zeros(config.out_channels),
            fc_weight: Array2::zeros((config.classes, config.out_channels)),
            fc_bias: Array1::zeros(config.classes),
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            self.conv_weight.as_slice().expect("standard layout"),
            self.conv_bias.as_slice().expect("standard layout"),
            self.fc_weight.as_slice().expect("standard layout"),
            self.fc_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.conv_weight.as_slice_mut().expect("standard layout"),
            self.conv_bias.as_slice_mut().expect("standard layout"),
            self.fc_weight.as_slice_mut().expect("standard layout"),
            self.fc_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.conv_weight += &other.conv_weight;
        self.conv_bias += &other.conv_bias;
        self.fc_weight += &other.fc_weight;
        self.fc_bias += &other.fc_bias;
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values of one forward pass, kept for backprop and probing.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    /// Convolution output before the ReLU, `[out × T]`.
    pub conv_pre_act: Array2<f64>,
    pub relu_mask: Array2<bool>,
    /// Inverted-dropout multipliers (0 or `1/(1-p)`); `None` in eval mode.
    pub dropout_mask: Option<Array2<f64>>,
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    pub mode: Mode,
}

fn check_input(config: &ModelConfig, x: &ArrayView2<f64>) -> Result<()> {
    if x.nrows() != config.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, model expects {}",
            x.nrows(),
            config.in_channels
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::Shape("input has no time samples".into()));
    }
    Ok(())
}

/// Same-padded, stride-1 convolution: `y[o,t] = b[o] + Σ_{i,k} w[o,i,k]·x_pad[i,t+k]`.
pub fn conv1d_same(params: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(&params.config, &x)?;
    let xp = Padded::new(x, params.config.kernel);
    Ok(kernels::conv_forward(
        params.conv_weight.view(),
        params.conv_bias.view(),
        &xp,
    ))
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Full forward pass. `rng` drives the dropout mask and is untouched in eval mode.
pub fn forward(
    params: &ModelParams,
    x: ArrayView2<f64>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardCache> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    let conv_pre_act = conv1d_same(params, x.view())?;
    let relu_mask = conv_pre_act.mapv(|v| v > 0.0);
    let mut activ = conv_pre_act.mapv(|v| v.max(0.0));

    let p = params.config.dropout;
    let dropout_mask = match mode {
        Mode::Train if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            // One bulk draw; a unit drops when its u32 falls below p·2³².
            let threshold = (p * 4_294_967_296.0).round().min(u32::MAX as f64) as u32;
            let mut bits = vec![0u32; activ.len()];
            rng.fill(&mut bits[..]);
            let mask = Array2::from_shape_vec(
                activ.raw_dim(),
                bits.into_iter()
                    .map(|b| if b < threshold { 0.0 } else { keep })
                    .collect(),
            )
            .expect("mask matches activation shape");
            activ *= &mask;
            Some(mask)
        }
        _ => None,
    };

    let pooled = activ.mean_axis(Axis(1)).expect("non-empty time axis");
    let logits = params.fc_weight.dot(&pooled) + &params.fc_bias;
    let probs = softmax(&logits);
    Ok(ForwardCache {
        input: x.to_owned(),
        conv_pre_act,
        relu_mask,
        dropout_mask,
        pooled,
        logits,
        probs,
        mode,
    })
}

/// Eval-mode forward (no dropout).
pub fn forward_eval(params: &ModelParams, x: ArrayView2<f64>) -> Result<ForwardCache> {
    // Eval never draws from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    forward(params, x, Mode::Eval, &mut unused)
}

/// Pooling-layer output in eval mode, without keeping the cache.
pub fn pooled_features(params: &ModelParams, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    let z = conv1d_same(params, x)?;
    Ok(z.mapv(|v| v.max(0.0))
        .mean_axis(Axis(1))
        .expect("non-empty time axis"))
}

/// Gradients of `Σ_c grad_logits[c]·logits[c]` with respect to every parameter,
/// through the same dropout realisation recorded in `cache`.
pub fn backward(
    cache: &ForwardCache,
    params: &ModelParams,
    grad_logits: &Array1<f64>,
) -> Result<Gradients> {
    let cfg = &params.config;
    let (out, t) = cache.conv_pre_act.dim();
    if grad_logits.len() != cfg.classes
        || out != cfg.out_channels
        || cache.input.nrows() != cfg.in_channels
        || cache.pooled.len() != cfg.out_channels
        || cache.input.ncols() != t
    {
        return Err(Error::Shape(
            "forward cache does not match these parameters".into(),
        ));
    }

    let mut grads = Gradients::zeros(cfg);
    grads.fc_bias.assign(grad_logits);
    for c in 0..cfg.classes {
        grads
            .fc_weight
            .row_mut(c)
            .assign(&(&cache.pooled * grad_logits[c]));
    }

    // d pooled[o] = Σ_c W_fc[c,o]·g[c]; the mean spreads it evenly over T.
    let grad_pooled = params.fc_weight.t().dot(grad_logits) / t as f64;
    let mut grad_pre = Array2::zeros((out, t));
    for (o, mut row) in grad_pre.rows_mut().into_iter().enumerate() {
        let gp = grad_pooled[o];
        let relu = cache.relu_mask.row(o);
        match &cache.dropout_mask {
            Some(mask) => row
                .iter_mut()
                .zip(relu.iter().zip(mask.row(o)))
                .for_each(|(g, (&on, &m))| *g = if on { gp * m } else { 0.0 }),
            None => row
                .iter_mut()
                .zip(relu.iter())
                .for_each(|(g, &on)| *g = if on { gp } else { 0.0 }),
        }
    }
    grads.conv_bias = grad_pre.sum_axis(Axis(1));

    let xp = Padded::new(cache.input.view(), cfg.kernel);
    grads.conv_weight = kernels::conv_weight_grad(grad_pre.view(), &xp, cfg.kernel);
    Ok(grads)
}
