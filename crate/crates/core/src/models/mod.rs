//! Desk-scale image and text classifiers.
//!
//! A [`Model`] owns its parameters as an ordered list of named [`Layer`]s
//! (bottom to top) plus the static graphs that evaluate them. Activation and
//! pooling operators are part of the graph, not the parameters, so
//! [`Model::with_variant`] can rebuild the same weights under ReLU/Softplus
//! and MaxPool/LSE-pool.

mod checkpoint;
mod image;
mod slice;
mod text;
mod train;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BackwardMode, Bindings, Graph};
use crate::seed::{derive_seed, purpose, rng};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use slice::{default_slice_dims, function_slice, SliceCurve, DEFAULT_SLICE_DIMS};
pub use text::TextMask;
pub use train::{accuracy, train, train_from, EpochStats, Hyper, Optimizer, TrainedModel};

pub const INPUT: &str = "x";
pub const TOKENS: &str = "tokens";
pub const TARGET: &str = "target";
pub const LOGITS: &str = "logits";
pub const LOSS: &str = "loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

impl Activation {
    pub fn is_relu(&self) -> bool {
        matches!(self, Activation::Relu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Lse { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block; 2 or 3 blocks.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 28,
            width: 28,
            conv_channels: vec![8, 16],
            kernel: 3,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub pad_id: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_len: 16,
            pad_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskConfig {
    Image(ImageConfig),
    Text(TextConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskConfig,
    pub activation: Activation,
    pub pooling: Pooling,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn image(num_classes: usize, seed: u64) -> Self {
        Self {
            task: TaskConfig::Image(ImageConfig::default()),
            activation: Activation::Relu,
            pooling: Pooling::Max,
            num_classes,
            seed,
        }
    }

    pub fn text(vocab_size: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            task: TaskConfig::Text(TextConfig {
                vocab_size,
                ..TextConfig::default()
            }),
            activation: Activation::Relu,
            pooling: Pooling::Max,
            num_classes,
            seed,
        }
    }

    pub fn is_text(&self) -> bool {
        matches!(self.task, TaskConfig::Text(_))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if let Activation::Softplus { beta } = self.activation {
            if !(beta > 0.0 && beta.is_finite()) {
                return bad(format!("softplus beta must be > 0, got {beta}"));
            }
        }
        if let Pooling::Lse { temperature } = self.pooling {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return bad(format!("LSE temperature must be > 0, got {temperature}"));
            }
        }
        match &self.task {
            TaskConfig::Image(c) => {
                if c.channels == 0 || c.height == 0 || c.width == 0 || c.kernel == 0 || c.hidden == 0 {
                    return bad("image dimensions must be positive".into());
                }
                if c.kernel % 2 == 0 {
                    return bad(format!("conv kernel must be odd, got {}", c.kernel));
                }
                let shrink = 1 << c.conv_channels.len();
                if c.height < shrink || c.width < shrink {
                    return bad(format!("{}x{} input too small for the conv stack", c.height, c.width));
                }
                if !(2..=3).contains(&c.conv_channels.len()) || c.conv_channels.contains(&0) {
                    return bad(format!(
                        "expected 2 or 3 positive conv blocks, got {:?}",
                        c.conv_channels
                    ));
                }
            }
            TaskConfig::Text(c) => {
                if c.layers < 1 {
                    return bad("at least one encoder layer is required".into());
                }
                if c.heads == 0 || c.embed_dim == 0 || c.embed_dim % c.heads != 0 {
                    return bad(format!(
                        "embed_dim {} must be divisible by heads {}",
                        c.embed_dim, c.heads
                    ));
                }
                if c.vocab_size < 2 || c.max_len == 0 || c.ff_dim == 0 || c.pad_id >= c.vocab_size {
                    return bad("invalid vocabulary / sequence dimensions".into());
                }
            }
        }
        Ok(())
    }
}

/// How a parameter tensor is (re-)initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamRole {
    /// Xavier/Glorot-uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Weight { fan_in: usize, fan_out: usize },
    /// Zero.
    Bias,
    /// Layer-norm gain, one.
    Gain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub params: Vec<Param>,
}

impl Layer {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, suffix: &str, shape: &[usize], role: ParamRole) {
        self.params.push(Param {
            name: format!("{}.{}", self.name, suffix),
            role,
            tensor: Tensor::zeros(shape),
        });
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_param(p: &mut Param, rng: &mut impl Rng) {
    match p.role {
        ParamRole::Weight { fan_in, fan_out } => {
            let bound = xavier_bound(fan_in, fan_out);
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        ParamRole::Bias => p.tensor.data_mut().fill(0.0),
        ParamRole::Gain => p.tensor.data_mut().fill(1.0),
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    /// Raw-input graph: `x` (image) or `tokens` (text), plus `target`.
    graph: Graph,
    /// Embedding-space graph for text models.
    embedded: Option<Graph>,
}

/// Builds a model and Xavier-initializes every weight from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut layers = match &config.task {
        TaskConfig::Image(c) => image::layers(c, config.num_classes),
        TaskConfig::Text(c) => text::layers(c, config.num_classes),
    };
    for (li, layer) in layers.iter_mut().enumerate() {
        let mut r = rng(derive_seed(config.seed, &[purpose::INIT, li as u64]));
        for p in &mut layer.params {
            init_param(p, &mut r);
        }
    }
    Model::assemble(config.clone(), layers)
}

impl Model {
    fn assemble(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        let (graph, embedded) = match &config.task {
            TaskConfig::Image(c) => (image::graph(c, &config)?, None),
            TaskConfig::Text(c) => (text::graph(c, &config, true)?, Some(text::graph(c, &config, false)?)),
        };
        let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidConfig(format!("duplicate layer `{n}`")));
            }
        }
        Ok(Self {
            config,
            layers,
            graph,
            embedded,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Layers bottom to top.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// Mutable access to one parameter tensor, for surgery in tests and tools.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn domain_graph(&self) -> &Graph {
        self.embedded.as_ref().unwrap_or(&self.graph)
    }

    fn bindings(&self) -> Bindings<'_> {
        self.params().map(|p| (p.name.as_str(), &p.tensor)).collect()
    }

    /// Same parameters, different activation/pooling operators.
    pub fn with_variant(&self, activation: Activation, pooling: Pooling) -> Result<Model> {
        let config = ModelConfig {
            activation,
            pooling,
            ..self.config.clone()
        };
        config.validate()?;
        Model::assemble(config, self.layers.clone())
    }

    /// Shape of the raw input accepted by [`Model::predict`].
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.config.task {
            TaskConfig::Image(c) => vec![c.channels, c.height, c.width],
            TaskConfig::Text(c) => vec![c.max_len],
        }
    }

    /// Shape of the space attributions live in: pixels, or token embeddings.
    pub fn domain_shape(&self) -> Vec<usize> {
        match &self.config.task {
            TaskConfig::Image(_) => self.input_shape(),
            TaskConfig::Text(c) => vec![c.max_len, c.embed_dim],
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.input_shape();
        if x.shape() != expected.as_slice() {
            return Err(Error::InvalidInput(format!(
                "expected input shape {expected:?}, got {:?}",
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput("input contains non-finite values".into()));
        }
        if let TaskConfig::Text(c) = &self.config.task {
            if let Some(bad) = x
                .data()
                .iter()
                .find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= c.vocab_size as f64)
            {
                return Err(Error::InvalidInput(format!(
                    "token id {bad} outside vocabulary of {}",
                    c.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Logits for a raw input (pixels in `[0, 1]`, or token ids).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mask = self.token_mask(x);
        let mut b = self.bindings();
        bind_mask(&mut b, mask.as_ref());
        let leaf = if self.config.is_text() { TOKENS } else { INPUT };
        b.insert(leaf, x);
        let eval = self.graph.evaluate(&b, &[LOGITS])?;
        Ok(self.graph.value(&eval, LOGITS)?.clone())
    }

    /// Maps a raw input into the attribution domain: identity for images,
    /// token-embedding rows for text.
    pub fn to_domain(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        match &self.config.task {
            TaskConfig::Image(_) => Ok(x.clone()),
            TaskConfig::Text(c) => {
                let table = self.param(text::TOKEN_TABLE).expect("text model has a token table");
                let d = c.embed_dim;
                let mut data = Vec::with_capacity(c.max_len * d);
                for &id in x.data() {
                    let row = id as usize;
                    data.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
                }
                Tensor::new(vec![c.max_len, d], data)
            }
        }
    }

    /// Default baseline in the attribution domain: the all-zero image, or the
    /// pad-token embedding at every position.
    pub fn default_baseline(&self) -> Tensor {
        match &self.config.task {
            TaskConfig::Image(_) => Tensor::zeros(&self.domain_shape()),
            TaskConfig::Text(c) => {
                let pads = Tensor::full(&[c.max_len], c.pad_id as f64);
                self.to_domain(&pads).expect("pad id is in vocabulary")
            }
        }
    }

    fn check_domain(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.domain_shape().as_slice() {
            return Err(Error::InvalidInput(format!(
                "expected domain shape {:?}, got {:?}",
                self.domain_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Logits for a point in the attribution domain, with every text
    /// position treated as a real token. Use [`Model::focus`] to evaluate
    /// under a specific input's pad mask.
    pub fn domain_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.unfocused().domain_logits(x)
    }

    /// `F_target(x)` for a point in the attribution domain.
    pub fn domain_output(&self, x: &Tensor, target: usize) -> Result<f64> {
        self.unfocused().domain_output(x, target)
    }

    pub fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "target {target} outside [0, {})",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// `(F_target(x), dF_target/dx)` in the attribution domain.
    pub fn domain_grad(&self, x: &Tensor, target: usize, mode: BackwardMode) -> Result<(f64, Tensor)> {
        self.unfocused().domain_grad(x, target, mode)
    }

    fn token_mask(&self, tokens: &Tensor) -> Option<TextMask> {
        match &self.config.task {
            TaskConfig::Image(_) => None,
            TaskConfig::Text(c) => Some(TextMask::from_tokens(tokens, c.pad_id)),
        }
    }

    /// The model as seen from one raw input: its attribution-domain point and
    /// a view that evaluates domain points under that input's pad mask.
    pub fn focus(&self, raw: &Tensor) -> Result<(Focused<'_>, Tensor)> {
        let x = self.to_domain(raw)?;
        Ok((
            Focused {
                model: self,
                mask: self.token_mask(raw),
            },
            x,
        ))
    }

    /// A view with no pad positions.
    pub fn unfocused(&self) -> Focused<'_> {
        let mask = match &self.config.task {
            TaskConfig::Image(_) => None,
            TaskConfig::Text(c) => Some(TextMask::unmasked(c.max_len)),
        };
        Focused { model: self, mask }
    }

    /// Cross-entropy loss and its gradient for every parameter, in
    /// [`Model::params`] order.
    pub fn loss_and_grads(&self, x: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>, Tensor)> {
        self.check_input(x)?;
        self.check_target(label)?;
        let mut onehot = Tensor::zeros(&[self.config.num_classes]);
        onehot.data_mut()[label] = 1.0;
        let mask = self.token_mask(x);
        let mut b = self.bindings();
        bind_mask(&mut b, mask.as_ref());
        let leaf = if self.config.is_text() { TOKENS } else { INPUT };
        b.insert(leaf, x);
        b.insert(TARGET, &onehot);
        let names: Vec<&str> = self.params().map(|p| p.name.as_str()).collect();
        let (eval, loss, mut grads) = self.graph.grad_full(&b, LOSS, None, &names, BackwardMode::Standard)?;
        let logits = self.graph.value(&eval, LOGITS)?.clone();
        let ordered = names.iter().map(|n| grads.remove(*n).expect("requested")).collect();
        Ok((loss, ordered, logits))
    }

    /// Copy with one layer's weights redrawn Xavier-uniform from `seed` and its
    /// biases zeroed; every other layer is untouched.
    pub fn xavier_reinit(&self, layer: &str, seed: u64) -> Result<Model> {
        let mut out = self.clone();
        let l = out
            .layers
            .iter_mut()
            .find(|l| l.name == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.into()))?;
        let mut r = rng(seed);
        for p in &mut l.params {
            init_param(p, &mut r);
        }
        Ok(out)
    }

    /// Installs parameter values by name.
    pub fn set_params(&mut self, values: &HashMap<String, Tensor>) -> Result<()> {
        for p in self.params_mut() {
            if let Some(v) = values.get(&p.name) {
                if v.shape() != p.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        node: p.name.clone(),
                        detail: format!("{:?} vs {:?}", v.shape(), p.tensor.shape()),
                    });
                }
                p.tensor = v.clone();
            }
        }
        Ok(())
    }
}

fn bind_mask<'a>(b: &mut Bindings<'a>, mask: Option<&'a TextMask>) {
    if let Some(m) = mask {
        b.insert(text::MASK_BIAS, &m.bias);
        b.insert(text::POOL_WEIGHTS, &m.pool);
    }
}

/// A model bound to the pad mask of one input; see [`Model::focus`].
#[derive(Debug, Clone)]
pub struct Focused<'a> {
    model: &'a Model,
    mask: Option<TextMask>,
}

impl Focused<'_> {
    pub fn model(&self) -> &Model {
        self.model
    }

    fn bindings(&self, x: &Tensor) -> Result<Bindings<'_>> {
        self.model.check_domain(x)?;
        let mut b = self.model.bindings();
        bind_mask(&mut b, self.mask.as_ref());
        Ok(b)
    }

    pub fn domain_logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.model.domain_graph();
        let mut b = self.bindings(x)?;
        b.insert(INPUT, x);
        let eval = g.evaluate(&b, &[LOGITS])?;
        Ok(g.value(&eval, LOGITS)?.clone())
    }

    pub fn domain_output(&self, x: &Tensor, target: usize) -> Result<f64> {
        self.model.check_target(target)?;
        Ok(self.domain_logits(x)?.data()[target])
    }

    pub fn domain_grad(&self, x: &Tensor, target: usize, mode: BackwardMode) -> Result<(f64, Tensor)> {
        self.model.check_target(target)?;
        let g = self.model.domain_graph();
        let mut b = self.bindings(x)?;
        b.insert(INPUT, x);
        let (v, mut grads) = g.grad_with_mode(&b, LOGITS, Some(target), &[INPUT], mode)?;
        Ok((v, grads.remove(INPUT).expect("requested leaf")))
    }
}
