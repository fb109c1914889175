//! Layer stacks, the two reference architectures, dropout and loss assembly.

mod dropout;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{
    batchless_forward, batchnorm_forward, batchrenorm_forward, BatchNormState, BatchlessVars,
    NllWeighting, NormLayerState, RenormClip, Sharing, SigmaMode,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use dropout::{dropout, dropout_mask, DropoutStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// Normalization variant placed after every hidden linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Bn,
    Brn,
    Bin,
    BinLog,
    BinInv,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [
        NormKind::None,
        NormKind::Bn,
        NormKind::Brn,
        NormKind::Bin,
        NormKind::BinLog,
        NormKind::BinInv,
    ];

    pub fn sigma_mode(self) -> Option<SigmaMode> {
        match self {
            NormKind::Bin => Some(SigmaMode::Direct),
            NormKind::BinLog => Some(SigmaMode::Log),
            NormKind::BinInv => Some(SigmaMode::Inverse),
            _ => None,
        }
    }

    pub fn is_batchless(self) -> bool {
        self.sigma_mode().is_some()
    }

    /// Uses batch statistics during training.
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, NormKind::Bn | NormKind::Brn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Bn => "bn",
            NormKind::Brn => "brn",
            NormKind::Bin => "bin",
            NormKind::BinLog => "binlog",
            NormKind::BinInv => "bininv",
        }
    }

    /// Table heading.
    pub fn label(self) -> &'static str {
        match self {
            NormKind::None => "∅",
            NormKind::Bn => "BN",
            NormKind::Brn => "BRN",
            NormKind::Bin => "BIN",
            NormKind::BinLog => "BINlog",
            NormKind::BinInv => "BINinv",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        NormKind::ALL
            .into_iter()
            .find(|k| k.as_str() == lower || (lower == "∅" && *k == NormKind::None))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown norm kind {s:?} (expected none, bn, brn, bin, binlog or bininv)"
                ))
            })
    }
}

/// Reading of the "width" of the uniform weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitWidth {
    /// Support `[−w/2, w/2]`.
    #[default]
    FullSupport,
    /// Support `[−w, w]`.
    HalfWidth,
}

/// Architecture hyperparameters shared by the builders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub norm: NormKind,
    pub seed: u64,
    pub drop_rate: f64,
    pub lambda: f64,
    pub init_width: InitWidth,
    /// L2 strength on dense weight matrices.
    pub weight_decay: f64,
    pub renorm: RenormClip,
}

impl ArchConfig {
    /// Drop rate 0.1 (keep-probability 0.9), λ = 0.1, decay 1e-6.
    pub fn spiral(norm: NormKind, seed: u64) -> Self {
        Self {
            norm,
            seed,
            drop_rate: 0.1,
            lambda: 0.1,
            init_width: InitWidth::FullSupport,
            weight_decay: 1e-6,
            renorm: RenormClip::default(),
        }
    }

    /// Drop rate 0.25, λ = 0.1, no decay.
    pub fn cifar(norm: NormKind, seed: u64) -> Self {
        Self {
            drop_rate: 0.25,
            weight_decay: 0.0,
            ..Self::spiral(norm, seed)
        }
    }
}

/// Declarative layer description; unit counts of norm layers are inferred
/// from the incoming shape.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        outputs: usize,
        decay: f64,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
    },
    Norm {
        kind: NormKind,
        sharing: Sharing,
        lambda: f64,
        renorm: RenormClip,
    },
    Isrlu {
        alpha: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Dropout {
        rate: f64,
    },
    MaxPool,
    Flatten,
    /// Marks the logits; softmax is fused into the cross-entropy loss.
    SoftmaxOutput,
}

/// A layer together with its state.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = x·W + b` with `W: [in, out]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
        decay: f64,
    },
    /// `kernel: [out, in, k, k]`, same padding.
    Conv {
        kernel: Tensor,
        bias: Tensor,
    },
    Batchless(NormLayerState),
    BatchNorm(BatchNormState),
    Isrlu(f64),
    LeakyRelu(f64),
    Dropout(f64),
    MaxPool,
    Flatten,
    SoftmaxOutput,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv { .. } => "conv",
            Layer::Batchless(_) => "batchless",
            Layer::BatchNorm(s) if s.renorm.is_some() => "batchrenorm",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Isrlu(_) => "isrlu",
            Layer::LeakyRelu(_) => "leaky_relu",
            Layer::Dropout(_) => "dropout",
            Layer::MaxPool => "maxpool",
            Layer::Flatten => "flatten",
            Layer::SoftmaxOutput => "softmax",
        }
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, Layer::Batchless(_) | Layer::BatchNorm(_))
    }

    fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        match self {
            Layer::Dense { weight, bias, .. } => {
                vec![(ParamRole::Weight, weight), (ParamRole::Bias, bias)]
            }
            Layer::Conv { kernel, bias } => {
                vec![(ParamRole::Weight, kernel), (ParamRole::Bias, bias)]
            }
            Layer::Batchless(s) => vec![
                (ParamRole::Mu, &s.mu),
                (ParamRole::Sigma, &s.sigma_param),
                (ParamRole::Gamma, &s.gamma),
                (ParamRole::Beta, &s.beta),
            ],
            Layer::BatchNorm(s) => vec![(ParamRole::Gamma, &s.gamma), (ParamRole::Beta, &s.beta)],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias, .. } => vec![weight, bias],
            Layer::Conv { kernel, bias } => vec![kernel, bias],
            Layer::Batchless(s) => vec![&mut s.mu, &mut s.sigma_param, &mut s.gamma, &mut s.beta],
            Layer::BatchNorm(s) => vec![&mut s.gamma, &mut s.beta],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Mu,
    Sigma,
    Gamma,
    Beta,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Mu => "mu",
            ParamRole::Sigma => "sigma",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
        }
    }
}

/// Metadata of one trainable tensor, in [`Model::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    /// `"{layer}.{role}"`, e.g. `"0.weight"`.
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    /// L2 strength; nonzero only on dense weight matrices.
    pub decay: f64,
    /// λ of the owning batchless layer for μ and σ parameters.
    pub lambda: Option<f64>,
    /// Belongs to a normalization layer.
    pub norm: bool,
}

/// Per-call forward settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub phase: Phase,
    /// Seed of the dropout masks of this step.
    pub dropout_seed: u64,
    /// Index of the first row of this call within the step's batch, so a
    /// slice of a batch draws the same masks as the whole batch.
    pub instance_offset: usize,
    /// Batch size losses are averaged over; `None` uses this call's rows.
    pub loss_batch: Option<usize>,
    /// Multiply batchless likelihood losses by λ.
    pub lambda_in_loss: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            phase: Phase::Eval,
            dropout_seed: 0,
            instance_offset: 0,
            loss_batch: None,
            lambda_in_loss: true,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            phase: Phase::Train,
            dropout_seed,
            ..Self::eval()
        }
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Output of the last layer run.
    pub logits: Var,
    /// One handle per trainable tensor, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Likelihood loss of each batchless layer, in layer order.
    pub nll: Vec<Var>,
    /// Gauged metric of each batchless layer, aligned with `nll`.
    pub gauged: Vec<f64>,
    /// Layer index of each batchless layer, aligned with `nll`.
    pub norm_layers: Vec<usize>,
}

/// Scalar losses assembled by [`Model::total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// Cross-entropy + likelihood terms (+ decay when requested).
    pub total: Var,
    /// Cross-entropy only.
    pub task: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    input_shape: Vec<usize>,
    pub norm: NormKind,
}

fn uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    width: InitWidth,
) -> Tensor {
    let w = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let half = match width {
        InitWidth::FullSupport => w / 2.0,
        InitWidth::HalfWidth => w,
    };
    let dist = Uniform::new_inclusive(-half, half).expect("finite bounds");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl Model {
    /// Builds a model for per-instance inputs of `input_shape` (`[F]` or
    /// `[C, H, W]`), checking that consecutive shapes compose.
    pub fn build(
        input_shape: &[usize],
        specs: &[LayerSpec],
        norm: NormKind,
        seed: u64,
        init_width: InitWidth,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        if shape.is_empty() || shape.contains(&0) || !(shape.len() == 1 || shape.len() == 3) {
            return Err(Error::dim("build", format!("input shape {shape:?}")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let bad = |what: &str, shape: &[usize]| {
                Error::dim(
                    "build",
                    format!("layer {i} ({what}) cannot take shape {shape:?}"),
                )
            };
            let layer = match *spec {
                LayerSpec::Dense { outputs, decay } => {
                    let [inputs] = shape[..] else {
                        return Err(bad("dense", &shape));
                    };
                    shape = vec![outputs];
                    Layer::Dense {
                        weight: uniform(&mut rng, &[inputs, outputs], inputs, outputs, init_width),
                        bias: Tensor::zeros(&[outputs]),
                        decay,
                    }
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad("conv", &shape));
                    };
                    if kernel % 2 == 0 {
                        return Err(Error::dim(
                            "build",
                            format!("layer {i}: even kernel {kernel}"),
                        ));
                    }
                    shape = vec![out_channels, h, w];
                    let k2 = kernel * kernel;
                    Layer::Conv {
                        kernel: uniform(
                            &mut rng,
                            &[out_channels, c, kernel, kernel],
                            c * k2,
                            out_channels * k2,
                            init_width,
                        ),
                        bias: Tensor::zeros(&[out_channels]),
                    }
                }
                LayerSpec::Norm {
                    kind,
                    sharing,
                    lambda,
                    renorm,
                } => {
                    let units = match (sharing, shape.len()) {
                        (Sharing::PerFeature, 1) | (Sharing::PerChannel, 3) => shape[0],
                        _ => return Err(bad("norm", &shape)),
                    };
                    match kind {
                        NormKind::None => {
                            return Err(Error::Config(format!(
                                "layer {i}: norm layer of kind none"
                            )))
                        }
                        NormKind::Bn => Layer::BatchNorm(BatchNormState::new(units, sharing, None)),
                        NormKind::Brn => {
                            Layer::BatchNorm(BatchNormState::new(units, sharing, Some(renorm)))
                        }
                        k => {
                            let mode = k.sigma_mode().expect("batchless kind");
                            Layer::Batchless(NormLayerState::new(units, mode, lambda, sharing))
                        }
                    }
                }
                LayerSpec::Isrlu { alpha } => Layer::Isrlu(alpha),
                LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(slope),
                LayerSpec::Dropout { rate } => {
                    check_rate(rate)?;
                    Layer::Dropout(rate)
                }
                LayerSpec::MaxPool => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad("maxpool", &shape));
                    };
                    if h < 2 || w < 2 {
                        return Err(bad("maxpool", &shape));
                    }
                    shape = vec![c, h / 2, w / 2];
                    Layer::MaxPool
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::SoftmaxOutput => {
                    if i + 1 != specs.len() || shape.len() != 1 {
                        return Err(bad("softmax", &shape));
                    }
                    Layer::SoftmaxOutput
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            norm,
        })
    }

    /// Assembles a model from existing layers and checks their shapes.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>, norm: NormKind) -> Result<Self> {
        let model = Self {
            layers,
            input_shape: input_shape.to_vec(),
            norm,
        };
        model.validate()?;
        Ok(model)
    }

    /// Per-instance input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-instance shape after every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, .. } => shape = vec![weight.shape()[1]],
                Layer::Conv { kernel, .. } => shape[0] = kernel.shape()[0],
                Layer::MaxPool => {
                    shape[1] /= 2;
                    shape[2] /= 2;
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                _ => {}
            }
            out.push(shape.clone());
        }
        out
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .pop()
            .unwrap_or_else(|| self.input_shape.clone())
    }

    /// Checks shapes and layer states; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = || {
                Error::dim(
                    "model",
                    format!("layer {i} ({}) on shape {shape:?}", layer.kind_name()),
                )
            };
            match layer {
                Layer::Dense { weight, bias, .. } => {
                    if shape.len() != 1
                        || weight.rank() != 2
                        || weight.shape()[0] != shape[0]
                        || bias.shape() != [weight.shape()[1]]
                    {
                        return Err(bad());
                    }
                    shape = vec![weight.shape()[1]];
                }
                Layer::Conv { kernel, bias } => {
                    let k = kernel.shape();
                    if shape.len() != 3
                        || k.len() != 4
                        || k[1] != shape[0]
                        || k[2] != k[3]
                        || k[2] % 2 == 0
                        || bias.shape() != [k[0]]
                    {
                        return Err(bad());
                    }
                    shape[0] = k[0];
                }
                Layer::Batchless(s) => {
                    s.validate()?;
                    if !norm_fits(&shape, s.sharing, s.units()) {
                        return Err(bad());
                    }
                }
                Layer::BatchNorm(s) => {
                    s.validate()?;
                    if !norm_fits(&shape, s.sharing, s.units()) {
                        return Err(bad());
                    }
                }
                Layer::Dropout(rate) => check_rate(*rate)?,
                Layer::MaxPool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(bad());
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::SoftmaxOutput => {
                    if i + 1 != self.layers.len() || shape.len() != 1 {
                        return Err(bad());
                    }
                }
                Layer::Isrlu(_) | Layer::LeakyRelu(_) => {}
            }
        }
        Ok(())
    }

    /// Trainable tensors in canonical order: per layer, weight and bias or
    /// μ, σ-parameter, γ and β.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, t)| t))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (role, t) in layer.params() {
                let decay = match (layer, role) {
                    (Layer::Dense { decay, .. }, ParamRole::Weight) => *decay,
                    _ => 0.0,
                };
                let lambda = match (layer, role) {
                    (Layer::Batchless(s), ParamRole::Mu | ParamRole::Sigma) => Some(s.lambda),
                    _ => None,
                };
                out.push(ParamInfo {
                    name: format!("{i}.{}", role.as_str()),
                    layer: i,
                    role,
                    shape: t.shape().to_vec(),
                    decay,
                    lambda,
                    norm: layer.is_norm(),
                });
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Indices of the batchless layers.
    pub fn batchless_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Batchless(_)))
            .collect()
    }

    /// Indices of the batch-norm and batch-renorm layers.
    pub fn batchnorm_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::BatchNorm(_)))
            .collect()
    }

    /// Errors if any batchless layer's σ fell below the floor.
    pub fn check_sigma(&self) -> Result<()> {
        for layer in &self.layers {
            if let Layer::Batchless(s) = layer {
                s.check_sigma()?;
            }
        }
        Ok(())
    }

    /// Runs every layer on `input` (`[N, ...input_shape]`).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        self.forward_until(tape, input, self.layers.len(), opts)
    }

    /// Runs layers `0..end`; `logits` then holds the input of layer `end`.
    pub fn forward_until(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        end: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        Ok(self.run(tape, input, end, opts, &[])?.0)
    }

    /// Inputs of the given layers (index `layers.len()` is the model output)
    /// from a single eval-phase pass.
    pub fn capture_inputs(&mut self, input: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        let end = layers.iter().copied().max().unwrap_or(0);
        let mut tape = Tape::new();
        let (_, captured) = self.run(&mut tape, input, end, ForwardOptions::eval(), layers)?;
        Ok(captured
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect())
    }

    fn run(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        end: usize,
        opts: ForwardOptions,
        capture: &[usize],
    ) -> Result<(ForwardPass, Vec<Var>)> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "forward",
                format!("input {shape:?}, model expects [N, {:?}]", self.input_shape),
            ));
        }
        let end = end.min(self.layers.len());
        let n = shape[0];
        let loss_batch = opts.loss_batch.unwrap_or(n);
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        let mut cursor = 0;
        let mut x = tape.constant(input.clone());
        let mut nll = Vec::new();
        let mut gauged = Vec::new();
        let mut norm_layers = Vec::new();
        let mut captured: Vec<Option<Var>> = vec![None; capture.len()];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let count = layer.params().len();
            let p = &params[cursor..cursor + count];
            cursor += count;
            if i >= end {
                continue;
            }
            for (slot, &c) in capture.iter().enumerate() {
                if c == i {
                    captured[slot] = Some(x);
                }
            }
            x = match layer {
                Layer::Dense { .. } => {
                    let y = tape.matmul(x, p[0])?;
                    tape.add(y, p[1])?
                }
                Layer::Conv { .. } => {
                    let y = tape.conv2d(x, p[0])?;
                    let units = tape.shape(p[1])[0];
                    let b = tape.reshape(p[1], &[units, 1, 1])?;
                    tape.add(y, b)?
                }
                Layer::Batchless(state) => {
                    let vars = BatchlessVars {
                        mu: p[0],
                        sigma_param: p[1],
                        gamma: p[2],
                        beta: p[3],
                    };
                    let per_instance = tape.value(x).len() / n;
                    let weighting = NllWeighting {
                        lambda_in_loss: opts.lambda_in_loss,
                        count: Some(loss_batch * per_instance),
                    };
                    let out = batchless_forward(tape, x, vars, state, weighting)?;
                    nll.push(out.nll);
                    gauged.push(out.gauged_metric);
                    norm_layers.push(i);
                    out.output
                }
                Layer::BatchNorm(state) => match state.renorm {
                    Some(clip) => {
                        batchrenorm_forward(tape, x, p[0], p[1], state, opts.phase, clip)?
                    }
                    None => batchnorm_forward(tape, x, p[0], p[1], state, opts.phase)?,
                },
                Layer::Isrlu(alpha) => tape.isrlu(x, *alpha)?,
                Layer::LeakyRelu(slope) => tape.leaky_relu(x, *slope)?,
                Layer::Dropout(rate) => {
                    let stream = DropoutStream {
                        seed: opts.dropout_seed,
                        layer: i as u64,
                        offset: opts.instance_offset,
                    };
                    dropout(tape, x, *rate, opts.phase, stream)?
                }
                Layer::MaxPool => tape.maxpool2d(x)?,
                Layer::Flatten => {
                    let flat = tape.value(x).len() / n;
                    tape.reshape(x, &[n, flat])?
                }
                Layer::SoftmaxOutput => x,
            };
        }
        if let Some(&bad) = capture.iter().find(|&&c| c > self.layers.len()) {
            return Err(Error::dim(
                "capture",
                format!("layer {bad} of {}", self.layers.len()),
            ));
        }
        let captured = captured.into_iter().map(|c| c.unwrap_or(x)).collect();
        let pass = ForwardPass {
            logits: x,
            params,
            nll,
            gauged,
            norm_layers,
        };
        Ok((pass, captured))
    }

    /// Class probabilities in eval phase.
    pub fn predict_proba(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, ForwardOptions::eval())?;
        Ok(softmax_rows(tape.value(pass.logits)))
    }

    /// Cross-entropy plus every batchless likelihood loss, plus
    /// `Σ decay·½‖W‖²` when `include_decay` is set. `normalizer` defaults to
    /// the number of rows.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        pass: &ForwardPass,
        labels: &[usize],
        normalizer: Option<f64>,
        include_decay: bool,
    ) -> Result<LossParts> {
        let normalizer = normalizer.unwrap_or(labels.len() as f64);
        let task = tape.softmax_cross_entropy_normalized(pass.logits, labels, normalizer)?;
        let mut total = task;
        for &l in &pass.nll {
            total = tape.add(total, l)?;
        }
        if include_decay {
            for (info, &v) in self.param_info().iter().zip(&pass.params) {
                if info.decay > 0.0 {
                    let sq = tape.square(v)?;
                    let s = tape.sum_all(sq)?;
                    let term = tape.scale(s, 0.5 * info.decay)?;
                    total = tape.add(total, term)?;
                }
            }
        }
        Ok(LossParts { total, task })
    }
}

fn norm_fits(shape: &[usize], sharing: Sharing, units: usize) -> bool {
    match sharing {
        Sharing::PerFeature => shape.len() == 1 && shape[0] == units,
        Sharing::PerChannel => shape.len() == 3 && shape[0] == units,
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )))
    }
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out.extend(row.iter().map(|&v| (v - m).exp() / s));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

fn norm_spec(cfg: &ArchConfig, sharing: Sharing) -> Option<LayerSpec> {
    (cfg.norm != NormKind::None).then_some(LayerSpec::Norm {
        kind: cfg.norm,
        sharing,
        lambda: cfg.lambda,
        renorm: cfg.renorm,
    })
}

/// 2 → 50 → 40 → 40 → 3 multilayer perceptron with ISRLU(α = 4), dropout
/// and an optional norm layer after each hidden dense layer.
pub fn spiral_mlp_specs(cfg: &ArchConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for width in [50, 40, 40] {
        specs.push(LayerSpec::Dense {
            outputs: width,
            decay: cfg.weight_decay,
        });
        specs.extend(norm_spec(cfg, Sharing::PerFeature));
        specs.push(LayerSpec::Isrlu { alpha: 4.0 });
        specs.push(LayerSpec::Dropout {
            rate: cfg.drop_rate,
        });
    }
    specs.push(LayerSpec::Dense {
        outputs: 3,
        decay: cfg.weight_decay,
    });
    specs.push(LayerSpec::SoftmaxOutput);
    specs
}

pub fn build_spiral_mlp(cfg: &ArchConfig) -> Result<Model> {
    Model::build(
        &[2],
        &spiral_mlp_specs(cfg),
        cfg.norm,
        cfg.seed,
        cfg.init_width,
    )
}

/// Convolutional classifier for 3×32×32 images: an input norm layer, three
/// conv(7/5/3, 64) + leaky ReLU(0.3) + norm + dropout + 2×2 max-pool blocks,
/// then dense 50, 50, 10. Conv-part norm layers share statistics per
/// channel; dense-part ones are per feature.
pub fn cifar_cnn_specs(cfg: &ArchConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    specs.extend(norm_spec(cfg, Sharing::PerChannel));
    for kernel in [7, 5, 3] {
        specs.push(LayerSpec::Conv {
            out_channels: 64,
            kernel,
        });
        specs.push(LayerSpec::LeakyRelu { slope: 0.3 });
        specs.extend(norm_spec(cfg, Sharing::PerChannel));
        specs.push(LayerSpec::Dropout {
            rate: cfg.drop_rate,
        });
        specs.push(LayerSpec::MaxPool);
    }
    specs.push(LayerSpec::Flatten);
    for _ in 0..2 {
        specs.push(LayerSpec::Dense {
            outputs: 50,
            decay: cfg.weight_decay,
        });
        specs.push(LayerSpec::LeakyRelu { slope: 0.3 });
        specs.extend(norm_spec(cfg, Sharing::PerFeature));
        specs.push(LayerSpec::Dropout {
            rate: cfg.drop_rate,
        });
    }
    specs.push(LayerSpec::Dense {
        outputs: 10,
        decay: cfg.weight_decay,
    });
    specs.push(LayerSpec::SoftmaxOutput);
    specs
}

pub fn build_cifar_cnn(cfg: &ArchConfig) -> Result<Model> {
    if cfg.norm == NormKind::Brn {
        return Err(Error::Config(
            "the CIFAR network has no batch-renorm variant".into(),
        ));
    }
    Model::build(
        &[3, 32, 32],
        &cifar_cnn_specs(cfg),
        cfg.norm,
        cfg.seed,
        cfg.init_width,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_parameter_counts() {
        let plain = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, 1)).unwrap();
        assert_eq!(
            plain.parameter_count(),
            2 * 50 + 50 + 50 * 40 + 40 + 40 * 40 + 40 + 40 * 3 + 3
        );
        let binlog = build_spiral_mlp(&ArchConfig::spiral(NormKind::BinLog, 1)).unwrap();
        assert_eq!(
            binlog.parameter_count() - plain.parameter_count(),
            4 * 50 + 2 * 4 * 40
        );
        let bn = build_spiral_mlp(&ArchConfig::spiral(NormKind::Bn, 1)).unwrap();
        assert_eq!(
            bn.parameter_count() - plain.parameter_count(),
            2 * 50 + 2 * 2 * 40
        );
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_spiral_mlp(&ArchConfig::spiral(NormKind::Bin, 7)).unwrap();
        let b = build_spiral_mlp(&ArchConfig::spiral(NormKind::Bin, 7)).unwrap();
        assert_eq!(a, b);
        let c = build_spiral_mlp(&ArchConfig::spiral(NormKind::Bin, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_support() {
        let m = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, 3)).unwrap();
        let Layer::Dense { weight, bias, .. } = &m.layers[0] else {
            panic!()
        };
        let w = (2.0f64 / 52.0).sqrt();
        assert!(weight.data().iter().all(|v| v.abs() <= w / 2.0));
        assert!(bias.data().iter().all(|&v| v == 0.0));
        let mut cfg = ArchConfig::spiral(NormKind::None, 3);
        cfg.init_width = InitWidth::HalfWidth;
        let m = build_spiral_mlp(&cfg).unwrap();
        let Layer::Dense { weight, .. } = &m.layers[0] else {
            panic!()
        };
        assert!(weight.data().iter().any(|v| v.abs() > w / 2.0));
    }

    #[test]
    fn cifar_shapes() {
        let m = build_cifar_cnn(&ArchConfig::cifar(NormKind::BinLog, 0)).unwrap();
        let shapes = m.layer_shapes();
        let pools: Vec<_> = m
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, Layer::MaxPool))
            .map(|(_, s)| s.clone())
            .collect();
        assert_eq!(
            pools,
            vec![vec![64, 16, 16], vec![64, 8, 8], vec![64, 4, 4]]
        );
        assert!(shapes.contains(&vec![1024]));
        assert_eq!(m.output_shape(), vec![10]);
        let units: Vec<_> = m
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Batchless(s) => Some((s.units(), s.sharing)),
                _ => None,
            })
            .collect();
        assert_eq!(
            units,
            vec![
                (3, Sharing::PerChannel),
                (64, Sharing::PerChannel),
                (64, Sharing::PerChannel),
                (64, Sharing::PerChannel),
                (50, Sharing::PerFeature),
                (50, Sharing::PerFeature),
            ]
        );
        let none = build_cifar_cnn(&ArchConfig::cifar(NormKind::None, 0)).unwrap();
        assert!(none.layers.iter().all(|l| !l.is_norm()));
        assert!(build_cifar_cnn(&ArchConfig::cifar(NormKind::Brn, 0)).is_err());
    }

    #[test]
    fn cifar_forward_shape() {
        let mut m = build_cifar_cnn(&ArchConfig::cifar(NormKind::Bn, 0)).unwrap();
        let x = Tensor::new(
            vec![2, 3, 32, 32],
            (0..6144).map(|i| (i % 17) as f64 / 17.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, ForwardOptions::train(1)).unwrap();
        assert_eq!(tape.shape(pass.logits), &[2, 10]);
    }

    #[test]
    fn eval_is_deterministic_and_plain_has_no_nll() {
        let mut m = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, 2)).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.5, 0.4, 0.9, -0.3]).unwrap();
        let a = m.predict_proba(&x).unwrap();
        let b = m.predict_proba(&x).unwrap();
        assert_eq!(a, b);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, ForwardOptions::train(0)).unwrap();
        assert!(pass.nll.is_empty());
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut cfg = ArchConfig::spiral(NormKind::BinLog, 2);
        cfg.drop_rate = 0.0;
        let mut m = build_spiral_mlp(&cfg).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let mut t1 = Tape::new();
        let p1 = m.forward(&mut t1, &x, ForwardOptions::train(5)).unwrap();
        let mut t2 = Tape::new();
        let p2 = m.forward(&mut t2, &x, ForwardOptions::eval()).unwrap();
        assert_eq!(t1.value(p1.logits), t2.value(p2.logits));
    }

    #[test]
    fn sigma_modes_compute_the_same_function() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let outs: Vec<Tensor> = [NormKind::Bin, NormKind::BinLog, NormKind::BinInv]
            .into_iter()
            .map(|k| {
                build_spiral_mlp(&ArchConfig::spiral(k, 4))
                    .unwrap()
                    .predict_proba(&x)
                    .unwrap()
            })
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn total_loss_parts() {
        let mut m = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, 2)).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, ForwardOptions::eval()).unwrap();
        let parts = m
            .total_loss(&mut tape, &pass, &[0, 2], None, false)
            .unwrap();
        assert_eq!(tape.value(parts.total), tape.value(parts.task));

        // a single 10×10 weight of 2s at decay 1e-6 contributes 2e-4
        let specs = [
            LayerSpec::Dense {
                outputs: 10,
                decay: 1e-6,
            },
            LayerSpec::SoftmaxOutput,
        ];
        let mut m = Model::build(&[10], &specs, NormKind::None, 0, InitWidth::FullSupport).unwrap();
        if let Layer::Dense { weight, .. } = &mut m.layers[0] {
            *weight = Tensor::full(&[10, 10], 2.0);
        }
        let mut tape = Tape::new();
        let pass = m
            .forward(&mut tape, &Tensor::zeros(&[1, 10]), ForwardOptions::eval())
            .unwrap();
        let parts = m.total_loss(&mut tape, &pass, &[0], None, true).unwrap();
        let decay = tape.value(parts.total).item() - tape.value(parts.task).item();
        assert!((decay - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected_at_build() {
        let specs = [LayerSpec::Conv {
            out_channels: 4,
            kernel: 3,
        }];
        assert!(Model::build(&[5], &specs, NormKind::None, 0, InitWidth::FullSupport).is_err());
        let specs = [LayerSpec::Dropout { rate: 1.0 }];
        assert!(matches!(
            Model::build(&[5], &specs, NormKind::None, 0, InitWidth::FullSupport),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn norm_kind_parsing() {
        for k in NormKind::ALL {
            assert_eq!(k.as_str().parse::<NormKind>().unwrap(), k);
        }
        assert_eq!("BINlog".parse::<NormKind>().unwrap(), NormKind::BinLog);
        assert!("layer".parse::<NormKind>().is_err());
    }
}
