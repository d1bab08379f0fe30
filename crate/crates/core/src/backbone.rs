//! Residual classification backbones with four addressable stages.
//!
//! Both presets are built from the same pieces: a stem, four residual stages
//! and a global-average-pool + linear head. The output of each stage's final
//! block is a valid Grad-CAM target ([`LayerId`]).
//!
//! Normalization is per-sample group normalization, so a forward pass never
//! depends on the other images in the batch or on a train/eval mode switch.

use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Array, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// One of the four residual stages, addressed 1..=4. The CAM target is the
/// output activation of the stage's last block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LayerId(u8);

impl LayerId {
    pub const ALL: [LayerId; 4] = [LayerId(1), LayerId(2), LayerId(3), LayerId(4)];

    pub fn new(stage_index: u8) -> Result<Self> {
        if (1..=4).contains(&stage_index) {
            Ok(LayerId(stage_index))
        } else {
            Err(Error::Config(format!(
                "target layer must be a stage index in 1..=4, got {stage_index}"
            )))
        }
    }

    pub fn stage_index(self) -> u8 {
        self.0
    }

    fn slot(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<u8> for LayerId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        LayerId::new(v)
    }
}

impl From<LayerId> for u8 {
    fn from(l: LayerId) -> u8 {
        l.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthPreset {
    /// Four stages of two basic blocks, widths 16/32/64/128, 3x3 stem.
    Tiny,
    /// ResNet-50 layout: bottleneck stages of 3/4/6/3 blocks, 7x7 stride-2
    /// stem with max pooling.
    #[serde(rename = "resnet50-like")]
    Resnet50Like,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth_preset: DepthPreset,
    pub num_classes: usize,
    #[serde(default)]
    pub input_shape: InputShape,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth_preset: DepthPreset::Tiny,
            num_classes: 10,
            input_shape: InputShape::default(),
            seed: 0,
        }
    }
}

struct Layout {
    stem_width: usize,
    stem_kernel: usize,
    stem_stride: usize,
    stem_pool: bool,
    widths: [usize; 4],
    blocks: [usize; 4],
    strides: [usize; 4],
    bottleneck: bool,
    max_groups: usize,
}

impl DepthPreset {
    fn layout(self) -> Layout {
        match self {
            DepthPreset::Tiny => Layout {
                stem_width: 16,
                stem_kernel: 3,
                stem_stride: 1,
                stem_pool: false,
                widths: [16, 32, 64, 128],
                blocks: [2, 2, 2, 2],
                strides: [1, 2, 2, 2],
                bottleneck: false,
                max_groups: 8,
            },
            DepthPreset::Resnet50Like => Layout {
                stem_width: 64,
                stem_kernel: 7,
                stem_stride: 2,
                stem_pool: true,
                widths: [64, 128, 256, 512],
                blocks: [3, 4, 6, 3],
                strides: [1, 2, 2, 2],
                bottleneck: true,
                max_groups: 32,
            },
        }
    }
}

impl Layout {
    fn stem_factor(&self) -> usize {
        self.stem_stride * if self.stem_pool { 2 } else { 1 }
    }

    fn stage_factor(&self, stage: usize) -> usize {
        self.stem_factor() * self.strides[..=stage].iter().product::<usize>()
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.widths[stage] * if self.bottleneck { 4 } else { 1 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let s = self.input_shape;
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Config("input shape has a zero dimension".into()));
        }
        let factor = self.downsampling();
        if !s.height.is_multiple_of(factor) || !s.width.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by the backbone's total downsampling factor {factor}",
                s.height, s.width
            )));
        }
        Ok(())
    }

    /// Total stride from input to the stage-4 feature grid.
    pub fn downsampling(&self) -> usize {
        self.depth_preset.layout().stage_factor(3)
    }

    /// `(channels, height, width)` of the activation captured at `layer`.
    pub fn stage_shape(&self, layer: LayerId) -> (usize, usize, usize) {
        let l = self.depth_preset.layout();
        let f = l.stage_factor(layer.slot());
        (
            l.stage_channels(layer.slot()),
            self.input_shape.height / f,
            self.input_shape.width / f,
        )
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: String, value: Array) -> usize {
        self.names.push(name);
        self.tensors.push(Tensor::parameter(value));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, i: usize, value: Array) -> Result<()> {
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::Input(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[i],
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = Tensor::parameter(value);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy)]
struct Conv {
    weight: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone)]
struct Block {
    /// `(conv, norm)` pairs on the residual branch, ReLU between them.
    branch: Vec<(Conv, Norm)>,
    shortcut: Option<(Conv, Norm)>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: ParamStore,
    max_groups: usize,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let value = ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, k, k]), || normal.sample(&mut self.rng));
        Conv {
            weight: self.params.push(format!("{name}.weight"), value),
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let groups = self.max_groups.min(c);
        Norm {
            gamma: self.params.push(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c]))),
            beta: self.params.push(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c]))),
            groups,
        }
    }
}

/// A residual CNN classifier `f(x; θ)`.
#[derive(Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    stem: (Conv, Norm),
    stem_pool: bool,
    stages: [Vec<Block>; 4],
    fc_weight: usize,
    fc_bias: usize,
}

/// Output of one forward pass.
pub struct ForwardResult {
    /// `[N, num_classes]` class scores.
    pub logits: Tensor,
    /// Row-wise softmax of `logits`.
    pub probabilities: Tensor,
    /// `[N, C, h, w]` stage activation, when a capture was requested. It is
    /// part of the graph that produced `logits`.
    pub captured: Option<Tensor>,
}

/// A classifier that exposes stage activations for Grad-CAM.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn forward(&self, x: &Tensor, capture: Option<LayerId>) -> Result<ForwardResult>;

    /// Runs the network from the output of `layer` to the logits.
    fn forward_from(&self, layer: LayerId, activations: &Tensor) -> Result<Tensor>;

    fn parameters(&self) -> &ParamStore;

    fn target_layers(&self) -> Vec<LayerId>;
}

/// Builds a backbone with seeded fan-in scaled initialization.
pub fn build_backbone(config: &BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let layout = config.depth_preset.layout();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        params: ParamStore::default(),
        max_groups: layout.max_groups,
    };

    let stem_conv = b.conv(
        "stem.conv",
        config.input_shape.channels,
        layout.stem_width,
        layout.stem_kernel,
        layout.stem_stride,
    );
    let stem_norm = b.norm("stem.norm", layout.stem_width);

    let mut cin = layout.stem_width;
    let mut stages: [Vec<Block>; 4] = Default::default();
    for s in 0..4 {
        let width = layout.widths[s];
        let cout = layout.stage_channels(s);
        for i in 0..layout.blocks[s] {
            let stride = if i == 0 { layout.strides[s] } else { 1 };
            let p = format!("stage{}.block{}", s + 1, i);
            let branch = if layout.bottleneck {
                vec![
                    (b.conv(&format!("{p}.conv1"), cin, width, 1, 1), b.norm(&format!("{p}.norm1"), width)),
                    (b.conv(&format!("{p}.conv2"), width, width, 3, stride), b.norm(&format!("{p}.norm2"), width)),
                    (b.conv(&format!("{p}.conv3"), width, cout, 1, 1), b.norm(&format!("{p}.norm3"), cout)),
                ]
            } else {
                vec![
                    (b.conv(&format!("{p}.conv1"), cin, cout, 3, stride), b.norm(&format!("{p}.norm1"), cout)),
                    (b.conv(&format!("{p}.conv2"), cout, cout, 3, 1), b.norm(&format!("{p}.norm2"), cout)),
                ]
            };
            let shortcut = (stride != 1 || cin != cout).then(|| {
                (
                    b.conv(&format!("{p}.shortcut.conv"), cin, cout, 1, stride),
                    b.norm(&format!("{p}.shortcut.norm"), cout),
                )
            });
            stages[s].push(Block { branch, shortcut });
            cin = cout;
        }
    }

    let bound = 1.0 / (cin as f64).sqrt();
    let fc_w = ArrayD::from_shape_simple_fn(IxDyn(&[config.num_classes, cin]), || b.rng.random_range(-bound..bound));
    let fc_b = ArrayD::from_shape_simple_fn(IxDyn(&[config.num_classes]), || b.rng.random_range(-bound..bound));
    let fc_weight = b.params.push("fc.weight".into(), fc_w);
    let fc_bias = b.params.push("fc.bias".into(), fc_b);

    Ok(Backbone {
        config: config.clone(),
        params: b.params,
        stem: (stem_conv, stem_norm),
        stem_pool: layout.stem_pool,
        stages,
        fc_weight,
        fc_bias,
    })
}

/// The four stage identifiers, in order.
pub fn list_target_layers(model: &Backbone) -> Vec<LayerId> {
    model.target_layers()
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Indices of parameters that act before the output of `layer`
    /// (stem and stages `1..=layer`).
    pub fn params_before(&self, layer: LayerId) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                n.starts_with("stem.")
                    || (1..=layer.stage_index()).any(|s| n.starts_with(&format!("stage{s}.")))
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of parameters that act after the output of `layer`.
    pub fn params_after(&self, layer: LayerId) -> Vec<usize> {
        let before = self.params_before(layer);
        (0..self.params.len()).filter(|i| !before.contains(i)).collect()
    }

    fn conv_norm(&self, x: &Tensor, (conv, norm): &(Conv, Norm)) -> Tensor {
        let y = autograd::conv2d(x, self.params.get(conv.weight), conv.stride, conv.pad);
        autograd::group_norm(
            &y,
            norm.groups,
            self.params.get(norm.gamma),
            self.params.get(norm.beta),
            NORM_EPS,
        )
    }

    fn block(&self, x: &Tensor, block: &Block) -> Tensor {
        let mut h = x.clone();
        let last = block.branch.len() - 1;
        for (i, cn) in block.branch.iter().enumerate() {
            h = self.conv_norm(&h, cn);
            if i != last {
                h = h.relu();
            }
        }
        let skip = match &block.shortcut {
            Some(cn) => self.conv_norm(x, cn),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }

    fn stage(&self, x: &Tensor, slot: usize) -> Tensor {
        self.stages[slot].iter().fold(x.clone(), |h, b| self.block(&h, b))
    }

    fn head(&self, x: &Tensor) -> Tensor {
        let pooled = autograd::global_avg_pool(x);
        autograd::linear(
            &pooled,
            self.params.get(self.fc_weight),
            self.params.get(self.fc_bias),
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_shape;
        match x.shape() {
            [n, c, h, w] if *n > 0 && *c == s.channels && *h == s.height && *w == s.width => Ok(()),
            other => Err(Error::Input(format!(
                "expected a batch of shape [N, {}, {}, {}], got {:?}",
                s.channels, s.height, s.width, other
            ))),
        }
    }
}

impl Classifier for Backbone {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn forward(&self, x: &Tensor, capture: Option<LayerId>) -> Result<ForwardResult> {
        self.check_input(x)?;
        let mut h = self.conv_norm(x, &self.stem).relu();
        if self.stem_pool {
            h = autograd::max_pool2d(&h, 3, 2, 1);
        }
        let mut captured = None;
        for slot in 0..4 {
            h = self.stage(&h, slot);
            if capture.is_some_and(|l| l.slot() == slot) {
                captured = Some(h.clone());
            }
        }
        let logits = self.head(&h);
        let probabilities = autograd::softmax(&logits);
        Ok(ForwardResult {
            logits,
            probabilities,
            captured,
        })
    }

    fn forward_from(&self, layer: LayerId, activations: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.config.stage_shape(layer);
        match activations.shape() {
            [_, ac, ah, aw] if (*ac, *ah, *aw) == (c, h, w) => {}
            other => {
                return Err(Error::Input(format!(
                    "{layer} activations must be [N, {c}, {h}, {w}], got {other:?}"
                )))
            }
        }
        let mut x = activations.clone();
        for slot in layer.slot() + 1..4 {
            x = self.stage(&x, slot);
        }
        Ok(self.head(&x))
    }

    fn parameters(&self) -> &ParamStore {
        &self.params
    }

    fn target_layers(&self) -> Vec<LayerId> {
        LayerId::ALL.to_vec()
    }
}
