//! Small convolutional classifiers with train / frozen / adaptive batch norm.

mod batchnorm;
pub mod checkpoint;

pub use batchnorm::{BatchNormState, BlendRule, BnMode, DEFAULT_EPS, DEFAULT_RUNNING_MOMENTUM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, GaussianStream};
use crate::tensor::{ops, Graph, Tensor, Var};

/// Anything that maps a batch to class logits and can be differentiated
/// with respect to its input.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Logits through `g`, treating all parameters as constants.
    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// Logits without building a graph.
    fn predict_logits(&self, x: &Tensor) -> Result<Tensor>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(ops::argmax_rows(&self.predict_logits(x)?))
    }
}

/// Serializable layer description; a list of these is the architecture sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, pad: usize },
    Dense { inputs: usize, outputs: usize },
    BatchNorm { channels: usize },
    Relu,
    MeanPool2,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_RUNNING_MOMENTUM
}

impl Architecture {
    /// conv(C→16,3×3)-BN-ReLU-conv(16→32,3×3)-BN-ReLU-meanpool2-flatten-dense-BN-ReLU-dense(classes).
    pub fn reference(input: [usize; 3], classes: usize, hidden: usize) -> Self {
        let [c, h, w] = input;
        let flat = 32 * (h / 2) * (w / 2);
        Self {
            input,
            classes,
            layers: vec![
                LayerSpec::Conv2d { in_channels: c, out_channels: 16, kernel: 3, pad: 1 },
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 16, out_channels: 32, kernel: 3, pad: 1 },
                LayerSpec::BatchNorm { channels: 32 },
                LayerSpec::Relu,
                LayerSpec::MeanPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: flat, outputs: hidden },
                LayerSpec::BatchNorm { channels: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: hidden, outputs: classes },
            ],
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_RUNNING_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Kernel `[O, C, k, k]`, stride 1.
    Conv2d { weight: Tensor, pad: usize },
    /// Weight `[in, out]`, bias `[out]`.
    Dense { weight: Tensor, bias: Tensor },
    BatchNorm(BatchNormState),
    Relu,
    MeanPool2,
    Flatten,
}

/// Normalized loss gradient with respect to one input image.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    /// `∂L/∂x`, shape `[C, H, W]`.
    pub raw: Tensor,
    /// `raw` shifted to mean 0.5 with ±3 standard deviations spanning `[0, 1]`, clipped.
    pub display: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    /// One gradient per parameter, registry order.
    pub params: Vec<Tensor>,
    pub input: Tensor,
    /// Distance of the evaluated point from the nearest ReLU kink.
    pub relu_margin: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
    mode: BnMode,
    blend_rule: BlendRule,
}

impl Network {
    /// Builds a network with He-normal weights drawn from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let mut init = GaussianStream::new(seed, &[streams::INIT, i as u64]);
            let layer = match *spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, pad } => {
                    let fan_in = in_channels * kernel * kernel;
                    let mut w = Tensor::zeros(&[out_channels, in_channels, kernel, kernel]);
                    init.fill(w.data_mut(), (2.0 / fan_in as f64).sqrt());
                    Layer::Conv2d { weight: w, pad }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let mut w = Tensor::zeros(&[inputs, outputs]);
                    init.fill(w.data_mut(), (2.0 / inputs as f64).sqrt());
                    Layer::Dense { weight: w, bias: Tensor::zeros(&[outputs]) }
                }
                LayerSpec::BatchNorm { channels } => {
                    let mut bn = BatchNormState::new(channels);
                    bn.eps = arch.bn_eps;
                    bn.running_momentum = arch.bn_momentum;
                    Layer::BatchNorm(bn)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MeanPool2 => Layer::MeanPool2,
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        let net = Self { arch, layers, mode: BnMode::Train, blend_rule: BlendRule::default() };
        net.check_shapes()?;
        Ok(net)
    }

    /// Assembles a network from explicit layers (tests, hand-built models).
    pub fn from_layers(arch: Architecture, layers: Vec<Layer>, mode: BnMode) -> Result<Self> {
        let mut net = Self { arch, layers, mode, blend_rule: BlendRule::default() };
        net.check_shapes()?;
        for bn in net.batch_norms_mut() {
            bn.mode = mode;
        }
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let [c, h, w] = self.arch.input;
        let probe = Tensor::zeros(&[2, c, h, w]);
        let mut shape = probe.shape().to_vec();
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv2d { weight, pad } => {
                    let s = weight.shape();
                    if shape.len() != 4 || shape[1] != s[1] {
                        return Err(Error::ShapeMismatch { op: "network", detail: format!("conv {s:?} on {shape:?}") });
                    }
                    vec![shape[0], s[0], shape[2] + 2 * pad + 1 - s[2], shape[3] + 2 * pad + 1 - s[3]]
                }
                Layer::Dense { weight, .. } => {
                    if shape.len() != 2 || shape[1] != weight.shape()[0] {
                        return Err(Error::ShapeMismatch {
                            op: "network",
                            detail: format!("dense {:?} on {shape:?}", weight.shape()),
                        });
                    }
                    vec![shape[0], weight.shape()[1]]
                }
                Layer::BatchNorm(bn) => {
                    if shape.len() < 2 || shape[1] != bn.channels {
                        return Err(Error::ShapeMismatch {
                            op: "network",
                            detail: format!("batch norm of {} channels on {shape:?}", bn.channels),
                        });
                    }
                    shape
                }
                Layer::Relu => shape,
                Layer::MeanPool2 => vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2],
                Layer::Flatten => vec![shape[0], shape[1..].iter().product()],
            };
        }
        if shape != [2, self.arch.classes] {
            return Err(Error::ShapeMismatch { op: "network", detail: format!("output {shape:?}") });
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn blend_rule(&self) -> BlendRule {
        self.blend_rule
    }

    pub fn set_blend_rule(&mut self, rule: BlendRule) {
        self.blend_rule = rule;
    }

    pub fn input_dims(&self) -> usize {
        self.arch.input.iter().product()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNormState> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Switches every batch-norm layer at once.
    pub fn set_mode(&mut self, mode: BnMode) -> Result<()> {
        match mode {
            BnMode::Train => {}
            BnMode::Frozen => {
                if self.batch_norms().any(|bn| !bn.has_running_stats()) {
                    return Err(Error::MissingRunningStats);
                }
            }
            BnMode::Adaptive => {
                if self.batch_norms().any(|bn| !bn.is_adapted()) {
                    return Err(Error::NotAdapted);
                }
            }
        }
        for bn in self.batch_norms_mut() {
            bn.mode = mode;
        }
        self.mode = mode;
        Ok(())
    }

    /// Learnable parameters in registry order: conv weight; dense weight, bias;
    /// batch-norm gamma, beta.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { weight, .. } => out.push(weight),
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d { weight, .. } => out.push(weight),
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.arch.input;
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "network",
                detail: format!("expected [N, {c}, {h}, {w}], got {:?}", x.shape()),
            });
        }
        if x.batch_size() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Graph forward pass. With `param_grad` the parameters are gradient
    /// leaves, returned in registry order. Train-mode batch statistics are
    /// returned per batch-norm layer.
    #[allow(clippy::type_complexity)]
    fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        param_grad: bool,
    ) -> Result<(Var, Vec<Var>, Vec<Option<(Vec<f64>, Vec<f64>, usize)>>)> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv2d { weight, pad } => {
                    let w = g.leaf(weight.clone(), param_grad);
                    params.push(w);
                    g.conv2d(h, w, *pad)?
                }
                Layer::Dense { weight, bias } => {
                    let w = g.leaf(weight.clone(), param_grad);
                    let b = g.leaf(bias.clone(), param_grad);
                    params.push(w);
                    params.push(b);
                    let z = g.matmul(h, w)?;
                    g.add(z, b)?
                }
                Layer::BatchNorm(bn) => {
                    let gamma = g.leaf(bn.gamma.clone(), param_grad);
                    let beta = g.leaf(bn.beta.clone(), param_grad);
                    params.push(gamma);
                    params.push(beta);
                    let (out, s) = bn.forward_graph(g, h, gamma, beta)?;
                    stats.push(s);
                    out
                }
                Layer::Relu => g.relu(h),
                Layer::MeanPool2 => g.mean_pool2(h)?,
                Layer::Flatten => {
                    let s = g.value(h).shape().to_vec();
                    g.reshape(h, &[s[0], s[1..].iter().product()])?
                }
            };
        }
        Ok((h, params, stats))
    }

    /// Training forward pass: parameters become gradient leaves (returned in
    /// registry order) and, in Train mode, running statistics are updated.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let (logits, params, stats) = self.forward_graph(g, x, true)?;
        for (bn, s) in self.batch_norms_mut().zip(stats) {
            if let Some((mean, var, count)) = s {
                bn.update_running(&mean, &var, count);
            }
        }
        Ok((logits, params))
    }

    /// Mean cross-entropy in the current mode and its gradients with respect
    /// to every parameter (registry order) and to `x`. Running statistics
    /// are left untouched.
    pub fn loss_and_gradients(&self, x: &Tensor, labels: &[usize]) -> Result<LossGradients> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let (logits, params, _) = self.forward_graph(&mut g, xv, true)?;
        let loss = g.cross_entropy(logits, labels)?;
        let relu_margin = g.min_relu_input_magnitude();
        let value = g.value(loss).item();
        g.backward(loss)?;
        let grad = |g: &Graph, v: Var| Tensor::new(g.value(v).shape().to_vec(), g.grad(v).expect("leaf requires grad").to_vec());
        Ok(LossGradients {
            loss: value,
            params: params.iter().map(|&p| grad(&g, p)).collect::<Result<_>>()?,
            input: grad(&g, xv)?,
            relu_margin,
        })
    }

    /// Mean cross-entropy in the current mode, without a graph.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(ops::cross_entropy(&self.predict_logits(x)?, labels)?.0.item())
    }

    /// Marks running statistics as trained (after a training run that only
    /// ever used batch statistics, or when loading a checkpoint).
    pub(crate) fn mark_trained(&mut self) {
        for bn in self.batch_norms_mut() {
            bn.mark_trained();
        }
    }

    /// Test-time adaptation: one forward sweep over `batch` in which each
    /// batch-norm layer estimates statistics of its input, blends them with
    /// its training statistics using `rho`, and normalizes with the blend
    /// before passing activations on. Leaves the network in Adaptive mode.
    pub fn adapt(&mut self, batch: &Tensor, rho: f64) -> Result<()> {
        let rule = self.blend_rule;
        self.adapt_with(batch, rho, rule)
    }

    pub fn adapt_with(&mut self, batch: &Tensor, rho: f64, rule: BlendRule) -> Result<()> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidMomentum(rho));
        }
        if batch.is_empty() || batch.batch_size() == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_input(batch)?;
        if batch.batch_size() < 2 {
            return Err(Error::BatchTooSmall(batch.batch_size()));
        }
        if self.batch_norms().next().is_none() {
            return Err(Error::NoBatchNorm);
        }
        let mut h = batch.clone();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.adapt(&h, rho, rule)?;
            }
            h = apply_layer(layer, &h)?;
        }
        self.mode = BnMode::Adaptive;
        Ok(())
    }

    /// Pre-affine standardized input of every batch-norm layer for `x`, in
    /// the current mode. Used to inspect normalization quality.
    pub fn batch_norm_activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut out = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            if let Layer::BatchNorm(bn) = layer {
                out.push(bn.standardize(&h)?);
            }
            h = apply_layer(layer, &h)?;
        }
        Ok(out)
    }

    /// `∂L/∂x` for one `[C, H, W]` image and its display normalization.
    pub fn loss_gradient_map(&self, image: &Tensor, label: usize) -> Result<GradientMap> {
        if image.ndim() != 3 || image.shape() != self.arch.input {
            return Err(Error::NotAnImage(image.shape().to_vec()));
        }
        if self.mode == BnMode::Train {
            return Err(Error::InvalidConfig("loss-gradient maps need Frozen or Adaptive batch norm".into()));
        }
        let [c, h, w] = self.arch.input;
        let mut g = Graph::new();
        let x = g.leaf(image.reshape(&[1, c, h, w])?, true);
        let logits = self.logits(&mut g, x)?;
        let loss = g.cross_entropy(logits, &[label])?;
        g.backward(loss)?;
        let raw = Tensor::new(vec![c, h, w], g.grad(x).expect("input requires grad").to_vec())?;
        let display = display_normalize(&raw);
        Ok(GradientMap { raw, display })
    }
}

/// Shift/scale so the mean maps to 0.5 and ±3 standard deviations span [0, 1].
pub fn display_normalize(raw: &Tensor) -> Tensor {
    let n = raw.len() as f64;
    let mean = raw.data().iter().sum::<f64>() / n;
    let std = (raw.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return raw.map(|_| 0.5);
    }
    raw.map(|v| (0.5 + (v - mean) / (6.0 * std)).clamp(0.0, 1.0))
}

fn apply_layer(layer: &Layer, h: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv2d { weight, pad } => ops::conv2d(h, weight, *pad),
        Layer::Dense { weight, bias } => ops::add(&ops::matmul(h, weight)?, bias),
        Layer::BatchNorm(bn) => bn.forward(h),
        Layer::Relu => Ok(ops::relu(h)),
        Layer::MeanPool2 => ops::mean_pool2(h),
        Layer::Flatten => {
            let s = h.shape();
            h.reshape(&[s[0], s[1..].iter().product()])
        }
    }
}

impl Classifier for Network {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_graph(g, x, false)?.0)
    }

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = apply_layer(layer, &h)?;
        }
        Ok(h)
    }
}

/// Affine classifier `logits = flatten(x)·W + b`; used as an analytic
/// reference model for attacks and certification.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// `[d, K]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl LinearModel {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Two-class model with logits `[0, w·x + b]`: class 1 is the positive side.
    pub fn binary(w: &[f64], b: f64) -> Self {
        let d = w.len();
        let mut weight = Tensor::zeros(&[d, 2]);
        for (i, &wi) in w.iter().enumerate() {
            weight.data_mut()[i * 2 + 1] = wi;
        }
        Self { weight, bias: Tensor::from_vec(vec![0.0, b]) }
    }

    fn flat(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.batch_size();
        x.reshape(&[n, x.len() / n])
    }
}

impl Classifier for LinearModel {
    fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        let flat = g.reshape(x, &[s[0], s.iter().skip(1).product()])?;
        let w = g.leaf(self.weight.clone(), false);
        let b = g.leaf(self.bias.clone(), false);
        let z = g.matmul(flat, w)?;
        g.add(z, b)
    }

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        ops::add(&ops::matmul(&self.flat(x)?, &self.weight)?, &self.bias)
    }
}
