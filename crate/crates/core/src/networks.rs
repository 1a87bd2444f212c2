//! Generator and discriminator families over a named parameter registry.

use std::collections::HashMap;

use paca_autograd::{conv2d_output_size, Element, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, CHANNELS};
use crate::error::{PacaError, Result};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;

/// One named tensor plus its trainability flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    /// Per-element trainability; `None` means every element follows `trainable`.
    pub mask: Option<Vec<bool>>,
}

impl<T: Element> Param<T> {
    pub fn is_element_trainable(&self, i: usize) -> bool {
        self.trainable && self.mask.as_ref().is_none_or(|m| m[i])
    }

    pub fn trainable_elements(&self) -> usize {
        match (&self.mask, self.trainable) {
            (_, false) => 0,
            (None, true) => self.tensor.len(),
            (Some(m), true) => m.iter().filter(|&&b| b).count(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub tensors: usize,
    pub elements: usize,
}

/// Ordered registry of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkParams<T = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> NetworkParams<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a trainable tensor; returns its position.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PacaError::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, trainable: true, mask: None });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Installs a per-element mask, which must match the tensor's length.
    pub fn set_mask(&mut self, name: &str, mask: Vec<bool>) -> Result<()> {
        let p = self.get_mut(name).ok_or_else(|| PacaError::Contract(format!("no parameter named {name}")))?;
        if mask.len() != p.tensor.len() {
            return Err(PacaError::Contract(format!(
                "mask for {name} has {} entries, tensor has {}",
                mask.len(),
                p.tensor.len()
            )));
        }
        p.mask = Some(mask);
        Ok(())
    }

    /// Clears every freeze flag and mask.
    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = true;
            p.mask = None;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn count(&self) -> ParamCount {
        count_params(self)
    }

    pub fn trainable_elements(&self) -> usize {
        self.params.iter().map(Param::trainable_elements).sum()
    }

    /// Count over the parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> ParamCount {
        let mut c = ParamCount::default();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            c.tensors += 1;
            c.elements += p.tensor.len();
        }
        c
    }

    pub fn cast<U: Element>(&self) -> NetworkParams<U> {
        NetworkParams {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    mask: p.mask.clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a leaf. Gradients are tracked for tensors
    /// that are trainable when `track` is set; element masks are applied by
    /// the optimizer, not here.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone(), track && p.trainable)).collect()
    }
}

/// `(tensors, scalar elements)` in a registry.
pub fn count_params<T: Element>(p: &NetworkParams<T>) -> ParamCount {
    ParamCount { tensors: p.params.len(), elements: p.params.iter().map(|p| p.tensor.len()).sum() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub side: usize,
    pub base_width: usize,
    pub n_down: usize,
    pub n_res: usize,
    pub n_up: usize,
}

impl GeneratorArch {
    pub fn desk() -> Self {
        Self { side: 64, base_width: 32, n_down: 2, n_res: 4, n_up: 2 }
    }

    pub fn full() -> Self {
        Self { side: 256, base_width: 64, n_down: 2, n_res: 9, n_up: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down != self.n_up {
            return Err(PacaError::Config("generator needs as many upsampling as downsampling stages".into()));
        }
        if self.base_width == 0 || self.side == 0 {
            return Err(PacaError::Config("generator width and side must be positive".into()));
        }
        let step = 1usize << self.n_down;
        if !self.side.is_multiple_of(step) || self.side / step < 2 {
            return Err(PacaError::Config(format!(
                "side {} must be a multiple of {step} with at least 2 pixels at the bottleneck",
                self.side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub base_width: usize,
    /// Number of stride-2 convolutions.
    pub n_layers: usize,
}

impl DiscriminatorArch {
    pub fn desk() -> Self {
        Self { base_width: 32, n_layers: 3 }
    }

    pub fn full() -> Self {
        Self { base_width: 64, n_layers: 3 }
    }

    /// Side of the score map produced for a `side x side` input.
    pub fn score_side(&self, side: usize) -> Result<usize> {
        let mut s = side;
        for _ in 0..self.n_layers {
            if s + 2 < 4 {
                return Err(PacaError::Config(format!("input side {side} too small for discriminator")));
            }
            s = conv2d_output_size(s, 4, 2, 1);
        }
        for _ in 0..2 {
            if s + 2 <= 4 {
                return Err(PacaError::Config(format!("input side {side} too small for discriminator")));
            }
            s = conv2d_output_size(s, 4, 1, 1);
        }
        Ok(s)
    }
}

/// Architecture of one full CycleGAN (two of each network).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleGanArch {
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
}

impl CycleGanArch {
    /// 64 px, 4 residual blocks, width 32.
    pub fn desk() -> Self {
        Self { generator: GeneratorArch::desk(), discriminator: DiscriminatorArch::desk() }
    }

    /// 256 px, 9 residual blocks, width 64.
    pub fn full() -> Self {
        Self { generator: GeneratorArch::full(), discriminator: DiscriminatorArch::full() }
    }

    /// Very small nets for fast tests (16 px).
    pub fn tiny() -> Self {
        Self {
            generator: GeneratorArch { side: 16, base_width: 4, n_down: 2, n_res: 2, n_up: 2 },
            discriminator: DiscriminatorArch { base_width: 4, n_layers: 2 },
        }
    }

    pub fn side(&self) -> usize {
        self.generator.side
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.score_side(self.generator.side)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    ReflectPad(usize),
    Conv { w: usize, b: usize, stride: usize, pad: usize },
    ConvT { w: usize, b: usize },
    Norm { g: usize, b: usize },
    Relu,
    LeakyRelu,
    Tanh,
    Residual(Vec<Layer>),
}

fn run_layers<T: Element>(layers: &[Layer], tape: &mut Tape<T>, p: &[Var], mut x: Var) -> Var {
    for layer in layers {
        x = match *layer {
            Layer::ReflectPad(n) => tape.reflect_pad(x, n),
            Layer::Conv { w, b, stride, pad } => tape.conv2d(x, p[w], Some(p[b]), stride, pad),
            Layer::ConvT { w, b } => tape.conv_transpose2d(x, p[w], Some(p[b]), 2, 1, 1),
            Layer::Norm { g, b } => tape.instance_norm(x, Some(p[g]), Some(p[b]), NORM_EPS),
            Layer::Relu => tape.relu(x),
            Layer::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Layer::Tanh => tape.tanh(x),
            Layer::Residual(ref inner) => {
                let y = run_layers(inner, tape, p, x);
                tape.add(x, y)
            }
        };
    }
    x
}

/// Seeded N(mean, 0.02) / zero initializer consumed in registry order.
struct Init {
    rng: ChaCha8Rng,
    params: NetworkParams<f32>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), params: NetworkParams::new() }
    }

    fn gaussian(&mut self, name: String, shape: &[usize], mean: f64) -> usize {
        let dist = Normal::new(mean, INIT_STD).expect("valid normal");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.params.push(name, Tensor::from_vec(shape, data)).expect("unique generated name")
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.push(name, Tensor::zeros(shape)).expect("unique generated name")
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> Layer {
        let w = self.gaussian(format!("{prefix}.weight"), &[cout, cin, k, k], 0.0);
        let b = self.zeros(format!("{prefix}.bias"), &[cout]);
        Layer::Conv { w, b, stride, pad }
    }

    fn conv_t(&mut self, prefix: &str, cin: usize, cout: usize) -> Layer {
        let w = self.gaussian(format!("{prefix}.weight"), &[cin, cout, 3, 3], 0.0);
        let b = self.zeros(format!("{prefix}.bias"), &[cout]);
        Layer::ConvT { w, b }
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Layer {
        let g = self.gaussian(format!("{prefix}.weight"), &[c], 1.0);
        let b = self.zeros(format!("{prefix}.bias"), &[c]);
        Layer::Norm { g, b }
    }
}

/// ResNet-style generator: 7x7 stem, strided downsampling, residual
/// blocks, transposed-convolution upsampling, 7x7 head with `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub arch: GeneratorArch,
    pub params: NetworkParams<f32>,
    layers: Vec<Layer>,
}

impl GeneratorNet {
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init = Init::new(seed);
        let w = arch.base_width;
        let mut layers = vec![Layer::ReflectPad(3), init.conv("stem.conv", w, CHANNELS, 7, 1, 0)];
        layers.push(init.norm("stem.norm", w));
        layers.push(Layer::Relu);
        let mut ch = w;
        for i in 1..=arch.n_down {
            layers.push(init.conv(&format!("down{i}.conv"), ch * 2, ch, 3, 2, 1));
            layers.push(init.norm(&format!("down{i}.norm"), ch * 2));
            layers.push(Layer::Relu);
            ch *= 2;
        }
        for i in 1..=arch.n_res {
            let block = vec![
                Layer::ReflectPad(1),
                init.conv(&format!("res{i}.conv1"), ch, ch, 3, 1, 0),
                init.norm(&format!("res{i}.norm1"), ch),
                Layer::Relu,
                Layer::ReflectPad(1),
                init.conv(&format!("res{i}.conv2"), ch, ch, 3, 1, 0),
                init.norm(&format!("res{i}.norm2"), ch),
            ];
            layers.push(Layer::Residual(block));
        }
        for i in 1..=arch.n_up {
            layers.push(init.conv_t(&format!("up{i}.conv"), ch, ch / 2));
            layers.push(init.norm(&format!("up{i}.norm"), ch / 2));
            layers.push(Layer::Relu);
            ch /= 2;
        }
        layers.push(Layer::ReflectPad(3));
        layers.push(init.conv("head.conv", CHANNELS, ch, 7, 1, 0));
        layers.push(Layer::Tanh);
        Ok(Self { arch, params: init.params, layers })
    }

    /// Name prefix shared by all parameters of residual block `index` (1-based).
    pub fn block_prefix(index: usize) -> String {
        format!("res{index}.")
    }

    /// Records the forward pass on `tape` using `params`, which must come
    /// from [`NetworkParams::bind`] on a registry of this architecture.
    pub fn forward_on<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var {
        assert_eq!(params.len(), self.params.len(), "parameter binding does not match network");
        let (_, c, h, w) = tape.value(x).dims4();
        assert!(c == CHANNELS && h == w && h % (1 << self.arch.n_down) == 0, "bad generator input {h}x{w}x{c}");
        run_layers(&self.layers, tape, params, x)
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.side() != self.arch.side {
            return Err(PacaError::Contract(format!(
                "generator configured for side {}, got {}",
                self.arch.side,
                x.side()
            )));
        }
        Ok(())
    }

    /// Inference on a batch of images.
    pub fn forward_batch(&self, xs: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(ImageTensor::batch(xs)?);
        let y = self.forward_on(&mut tape, &p, x);
        ImageTensor::unbatch(tape.value(y))
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.forward_batch(&[x])?.remove(0))
    }

    /// Same architecture with the given parameters (names and shapes must match).
    pub fn with_params(&self, params: NetworkParams<f32>) -> Result<Self> {
        check_same_layout(&self.params, &params)?;
        Ok(Self { arch: self.arch, params, layers: self.layers.clone() })
    }
}

/// PatchGAN-style discriminator producing an `S x S` map of patch scores.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    pub arch: DiscriminatorArch,
    pub params: NetworkParams<f32>,
    layers: Vec<Layer>,
}

/// Spatial grid of real-valued discriminator scores, `N x 1 x S x S`.
pub type ScoreMap = Tensor<f32>;

impl DiscriminatorNet {
    pub fn new(arch: DiscriminatorArch, seed: u64) -> Result<Self> {
        if arch.base_width == 0 || arch.n_layers == 0 {
            return Err(PacaError::Config("discriminator width and depth must be positive".into()));
        }
        let mut init = Init::new(seed);
        let w = arch.base_width;
        let mut layers = vec![init.conv("layer1.conv", w, CHANNELS, 4, 2, 1), Layer::LeakyRelu];
        let mut ch = w;
        for n in 1..=arch.n_layers {
            let stride = if n < arch.n_layers { 2 } else { 1 };
            let next = w * (1 << n).min(8);
            let idx = n + 1;
            layers.push(init.conv(&format!("layer{idx}.conv"), next, ch, 4, stride, 1));
            layers.push(init.norm(&format!("layer{idx}.norm"), next));
            layers.push(Layer::LeakyRelu);
            ch = next;
        }
        layers.push(init.conv("head.conv", 1, ch, 4, 1, 1));
        Ok(Self { arch, params: init.params, layers })
    }

    pub fn forward_on<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var {
        assert_eq!(params.len(), self.params.len(), "parameter binding does not match network");
        run_layers(&self.layers, tape, params, x)
    }

    pub fn forward_batch(&self, xs: &[&ImageTensor]) -> Result<ScoreMap> {
        let side = xs.first().map(|x| x.side()).ok_or_else(|| PacaError::Contract("empty batch".into()))?;
        self.arch.score_side(side).map_err(|e| PacaError::Contract(e.to_string()))?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(ImageTensor::batch(xs)?);
        let y = self.forward_on(&mut tape, &p, x);
        Ok(tape.value(y).clone())
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<ScoreMap> {
        self.forward_batch(&[x])
    }

    pub fn with_params(&self, params: NetworkParams<f32>) -> Result<Self> {
        check_same_layout(&self.params, &params)?;
        Ok(Self { arch: self.arch, params, layers: self.layers.clone() })
    }
}

fn check_same_layout(a: &NetworkParams<f32>, b: &NetworkParams<f32>) -> Result<()> {
    if a.len() != b.len() {
        return Err(PacaError::Contract(format!("expected {} parameters, got {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b.iter()) {
        if x.name != y.name || x.tensor.shape() != y.tensor.shape() {
            return Err(PacaError::Contract(format!(
                "parameter {} {:?} does not match {} {:?}",
                x.name,
                x.tensor.shape(),
                y.name,
                y.tensor.shape()
            )));
        }
    }
    Ok(())
}
