//! Linear-chain models: the convolutional autoencoder, the CNN classifier,
//! truncation to a prefix of layers, and whole-model forward/backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, Cache, Conv2d, Dense, Layer, LayerKind, ParamGrads};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Autoencoder,
    Classifier,
    /// A prefix of another model, as produced by [`ModelSpec::truncate`].
    Truncated,
    /// Hand-assembled layer stack.
    Custom,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Classifier => "classifier",
            ModelKind::Truncated => "truncated",
            ModelKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of each encoder stage; one max-pool per stage.
    pub channel_schedule: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 1,
            channel_schedule: vec![16, 8, 8],
            kernel_size: 3,
        }
    }
}

impl AutoencoderConfig {
    pub fn pool_stages(&self) -> usize {
        self.channel_schedule.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.is_empty() {
            return Err(Error::InvalidConfig("channel schedule must be nonempty".into()));
        }
        check_divisible(self.input_size, self.pool_stages())
    }

    /// Bottleneck shape `(C, H, W)`.
    pub fn latent_shape(&self) -> [usize; 3] {
        let side = self.input_size >> self.pool_stages();
        [*self.channel_schedule.last().unwrap_or(&0), side, side]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of each conv stage; one max-pool per stage.
    pub conv_channels: Vec<usize>,
    pub hidden_units: usize,
    pub num_classes: usize,
    pub kernel_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 1,
            conv_channels: vec![16, 32, 64],
            hidden_units: 64,
            num_classes: 2,
            kernel_size: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidConfig("conv stages must be nonempty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "a classifier needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::InvalidConfig("hidden units must be positive".into()));
        }
        check_divisible(self.input_size, self.conv_channels.len())
    }

    /// Number of layers in the convolutional trunk (conv + pool pairs).
    pub fn trunk_len(&self) -> usize {
        2 * self.conv_channels.len()
    }
}

fn check_divisible(size: usize, stages: usize) -> Result<()> {
    let factor = 1usize.checked_shl(stages as u32).unwrap_or(0);
    if size == 0 || factor == 0 || size % factor != 0 {
        return Err(Error::InvalidConfig(format!(
            "input size {size} is not divisible by 2^{stages}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelConfig {
    Autoencoder(AutoencoderConfig),
    Classifier(ClassifierConfig),
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec<T = f32> {
    pub kind: ModelKind,
    /// `(C, H, W)` of a single input image.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer<T>>,
    /// Number of leading layers forming the encoder (autoencoders only).
    pub encoder_len: Option<usize>,
    pub frozen: Vec<bool>,
    pub config: ModelConfig,
}

/// Activations and backward records from a full forward pass.
pub struct ForwardTrace<T> {
    pub activations: Vec<Tensor<T>>,
    pub caches: Vec<Cache<T>>,
}

impl<T> ForwardTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("models have at least one layer")
    }
}

impl<T: Element> ModelSpec<T> {
    /// Assemble and validate a custom layer stack.
    pub fn custom(input_shape: [usize; 3], layers: Vec<Layer<T>>) -> Result<Self> {
        let model = Self {
            kind: ModelKind::Custom,
            input_shape,
            frozen: vec![false; layers.len()],
            layers,
            encoder_len: None,
            config: ModelConfig::Custom,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Output shape of every layer for a batch of `batch` inputs.
    pub fn layer_shapes(&self, batch: usize) -> Result<Vec<Shape>> {
        let [c, h, w] = self.input_shape;
        let mut shape = [batch, c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(shape).map_err(|e| with_layer(e, i))?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("model has no layers".into()));
        }
        if self.frozen.len() != self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "frozen mask has {} entries for {} layers",
                self.frozen.len(),
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let ok = match layer {
                Layer::Conv2d(c) => {
                    c.kernel_size() % 2 == 1
                        && c.weight.shape()[3] == c.kernel_size()
                        && c.bias.len() == c.out_channels()
                }
                Layer::Dense(d) => d.weight.shape()[2..] == [1, 1] && d.bias.len() == d.units(),
                _ => true,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("layer {i} has malformed parameters")));
            }
        }
        let shapes = self.layer_shapes(1)?;
        if let Some(e) = self.encoder_len {
            if e == 0 || e > self.layers.len() {
                return Err(Error::InvalidConfig(format!(
                    "encoder length {e} outside 1..={}",
                    self.layers.len()
                )));
            }
        }
        if self.kind == ModelKind::Autoencoder {
            let [c, h, w] = self.input_shape;
            let last = shapes[shapes.len() - 1];
            if last != [1, c, h, w] {
                return Err(Error::InvalidConfig(format!(
                    "autoencoder output {last:?} does not match input {:?}",
                    self.input_shape
                )));
            }
            if self.encoder_len.is_none() {
                return Err(Error::InvalidConfig("autoencoder without encoder length".into()));
            }
        }
        Ok(())
    }

    /// Largest depth accepted by [`truncate`](Self::truncate).
    pub fn max_depth(&self) -> usize {
        match (self.kind, self.encoder_len) {
            (ModelKind::Autoencoder, Some(e)) => e,
            _ => self.layers.len(),
        }
    }

    /// The first `depth` layers as a standalone model. Autoencoders can only
    /// be truncated inside the encoder.
    pub fn truncate(&self, depth: usize) -> Result<Self> {
        let max = self.max_depth();
        if depth < 1 || depth > max {
            return Err(Error::DepthOutOfRange { depth, min: 1, max });
        }
        Ok(self.prefix(depth))
    }

    /// Unchecked prefix used by truncation and filter synthesis (which may
    /// target decoder layers).
    pub(crate) fn prefix(&self, depth: usize) -> Self {
        let depth = depth.min(self.layers.len());
        if depth == self.layers.len() {
            return self.clone();
        }
        Self {
            kind: ModelKind::Truncated,
            input_shape: self.input_shape,
            layers: self.layers[..depth].to_vec(),
            encoder_len: self.encoder_len.map(|e| e.min(depth)),
            frozen: self.frozen[..depth].to_vec(),
            config: self.config.clone(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = input.shape();
        if [c, h, w] != self.input_shape {
            let [ec, eh, ew] = self.input_shape;
            return Err(Error::ShapeMismatch {
                layer: Some(0),
                expected: format!("[N, {ec}, {eh}, {ew}]"),
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Output of every layer, in order; the last element is the model output.
    pub fn forward_model(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward_trace(input)?.activations)
    }

    /// Model output only.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x).map_err(|e| with_layer(e, i))?.0;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = activations.last().unwrap_or(input);
            let (y, cache) = layer.forward(x).map_err(|e| with_layer(e, i))?;
            activations.push(y);
            caches.push(cache);
        }
        Ok(ForwardTrace {
            activations,
            caches,
        })
    }

    /// Backpropagate `grad_output` through the whole stack. Returns the
    /// gradient w.r.t. the input and per-layer parameter gradients.
    pub fn backward_model(
        &self,
        trace: &ForwardTrace<T>,
        grad_output: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Option<ParamGrads<T>>>)> {
        self.backward_from(&trace.caches, self.layers.len(), grad_output.clone())
    }

    /// Backpropagate through layers `0..end`, starting from the gradient of
    /// layer `end - 1`'s output.
    pub(crate) fn backward_from(
        &self,
        caches: &[Cache<T>],
        end: usize,
        mut grad: Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Option<ParamGrads<T>>>)> {
        let mut grads = vec![None; self.layers.len()];
        for i in (0..end).rev() {
            let r = self.layers[i]
                .backward(&caches[i], &grad)
                .map_err(|e| with_layer(e, i))?;
            grads[i] = r.grad_params;
            grad = r.grad_input;
        }
        Ok((grad, grads))
    }

    /// Glorot-uniform weights and zero biases for every parameterized layer.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            glorot_init(layer, &mut rng);
        }
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &Conv2d<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv2d(c) => Some((i, c)),
            _ => None,
        })
    }

    /// Number of filters of conv layer `layer`, or an error for other kinds.
    pub fn filter_count(&self, layer: usize) -> Result<usize> {
        match self.layers.get(layer) {
            Some(Layer::Conv2d(c)) => Ok(c.out_channels()),
            _ => Err(Error::NotConvLayer { layer }),
        }
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn cast<U: Element>(&self) -> ModelSpec<U> {
        ModelSpec {
            kind: self.kind,
            input_shape: self.input_shape,
            layers: self.layers.iter().map(cast_layer).collect(),
            encoder_len: self.encoder_len,
            frozen: self.frozen.clone(),
            config: self.config.clone(),
        }
    }
}

fn cast_layer<T: Element, U: Element>(layer: &Layer<T>) -> Layer<U> {
    match layer {
        Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
            weight: c.weight.cast(),
            bias: c.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            activation: c.activation,
        }),
        Layer::Dense(d) => Layer::Dense(Dense {
            weight: d.weight.cast(),
            bias: d.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            activation: d.activation,
        }),
        Layer::MaxPool2x2 => Layer::MaxPool2x2,
        Layer::UpsampleNearest2x => Layer::UpsampleNearest2x,
        Layer::Flatten => Layer::Flatten,
    }
}

pub(crate) fn glorot_init<T: Element>(layer: &mut Layer<T>, rng: &mut impl Rng) {
    let (fan_in, fan_out) = match layer {
        Layer::Conv2d(c) => {
            let k2 = c.kernel_size() * c.kernel_size();
            (c.in_channels() * k2, c.out_channels() * k2)
        }
        Layer::Dense(d) => (d.inputs(), d.units()),
        _ => return,
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    if let Some((w, b)) = layer.params_mut() {
        for v in w.data_mut() {
            *v = T::from_f64(rng.random_range(-limit..limit));
        }
        b.fill(T::ZERO);
    }
}

fn with_layer(e: Error, i: usize) -> Error {
    match e {
        Error::ShapeMismatch {
            layer: None,
            expected,
            actual,
        } => Error::ShapeMismatch {
            layer: Some(i),
            expected,
            actual,
        },
        Error::OddSpatialDims {
            layer: None,
            height,
            width,
        } => Error::OddSpatialDims {
            layer: Some(i),
            height,
            width,
        },
        other => other,
    }
}

/// Encoder `[Conv(c_i, relu), MaxPool]*`, mirrored decoder
/// `[Conv(c_i, relu), Upsample]*`, then `Conv(input channels, sigmoid)`.
pub fn build_autoencoder<T: Element>(config: &AutoencoderConfig, seed: u64) -> Result<ModelSpec<T>> {
    config.validate()?;
    let k = config.kernel_size;
    let mut layers = Vec::new();
    let mut c = config.input_channels;
    for &out in &config.channel_schedule {
        layers.push(Layer::Conv2d(Conv2d::zeros(c, out, k, Activation::Relu)?));
        layers.push(Layer::MaxPool2x2);
        c = out;
    }
    let encoder_len = layers.len();
    for &out in config.channel_schedule.iter().rev() {
        layers.push(Layer::Conv2d(Conv2d::zeros(c, out, k, Activation::Relu)?));
        layers.push(Layer::UpsampleNearest2x);
        c = out;
    }
    layers.push(Layer::Conv2d(Conv2d::zeros(
        c,
        config.input_channels,
        k,
        Activation::Sigmoid,
    )?));
    let mut model = ModelSpec {
        kind: ModelKind::Autoencoder,
        input_shape: [config.input_channels, config.input_size, config.input_size],
        frozen: vec![false; layers.len()],
        layers,
        encoder_len: Some(encoder_len),
        config: ModelConfig::Autoencoder(config.clone()),
    };
    model.initialize(seed);
    model.validate()?;
    Ok(model)
}

/// `[Conv(c_i, relu), MaxPool]*`, `Flatten`, `Dense(hidden, relu)`,
/// `Dense(num_classes, linear)`.
pub fn build_classifier<T: Element>(config: &ClassifierConfig, seed: u64) -> Result<ModelSpec<T>> {
    config.validate()?;
    let k = config.kernel_size;
    let mut layers = Vec::new();
    let mut c = config.input_channels;
    for &out in &config.conv_channels {
        layers.push(Layer::Conv2d(Conv2d::zeros(c, out, k, Activation::Relu)?));
        layers.push(Layer::MaxPool2x2);
        c = out;
    }
    let side = config.input_size >> config.conv_channels.len();
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense(Dense::zeros(
        c * side * side,
        config.hidden_units,
        Activation::Relu,
    )?));
    layers.push(Layer::Dense(Dense::zeros(
        config.hidden_units,
        config.num_classes,
        Activation::Linear,
    )?));
    let mut model = ModelSpec {
        kind: ModelKind::Classifier,
        input_shape: [config.input_channels, config.input_size, config.input_size],
        frozen: vec![false; layers.len()],
        layers,
        encoder_len: None,
        config: ModelConfig::Classifier(config.clone()),
    };
    model.initialize(seed);
    model.validate()?;
    Ok(model)
}
