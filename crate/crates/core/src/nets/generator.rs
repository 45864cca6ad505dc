use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::{BatchNormMode, Graph, NodeId, ParamId, Tensor};
use crate::nets::{init_with_rng, FeatureExtractor, InitScheme, NetError};
use crate::rng;
use crate::scalar::Scalar;

pub const LATENT_INPUT: &str = "z";
pub const SAMPLES_OUTPUT: &str = "samples";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Mlp,
    Resnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Declarative generator architecture.
///
/// `output_shape` is `[dims]` for the MLP and `[channels, height, width]`
/// for the residual generator, whose height and width must equal
/// `base_resolution · 2^num_blocks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub latent_dim: usize,
    #[serde(default = "one")]
    pub channel_multiplier: f64,
    pub output_shape: Vec<usize>,
    /// MLP hidden widths before the channel multiplier is applied.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// MLP only: batch normalization between each hidden dense layer and its ReLU.
    #[serde(default)]
    pub hidden_norm: bool,
    #[serde(default = "default_activation")]
    pub output_activation: OutputActivation,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_base_resolution")]
    pub base_resolution: usize,
    #[serde(default = "default_num_blocks")]
    pub num_blocks: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_activation() -> OutputActivation {
    OutputActivation::Tanh
}
fn default_base_channels() -> usize {
    32
}
fn default_base_resolution() -> usize {
    4
}
fn default_num_blocks() -> usize {
    2
}

impl GeneratorSpec {
    /// Three hidden layers of width `128·n` mapping to 2-D points.
    pub fn point_mlp(latent_dim: usize, channel_multiplier: f64, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::Mlp,
            latent_dim,
            channel_multiplier,
            output_shape: vec![2],
            hidden: vec![128, 128, 128],
            hidden_norm: false,
            output_activation: OutputActivation::Identity,
            base_channels: default_base_channels(),
            base_resolution: default_base_resolution(),
            num_blocks: default_num_blocks(),
            seed,
        }
    }

    /// Residual generator: 4×4 base, two blocks, 16×16 output, 32 base channels.
    pub fn image_resnet(latent_dim: usize, out_channels: usize, channel_multiplier: f64, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::Resnet,
            latent_dim,
            channel_multiplier,
            output_shape: vec![out_channels, 16, 16],
            hidden: Vec::new(),
            hidden_norm: false,
            output_activation: OutputActivation::Tanh,
            base_channels: 32,
            base_resolution: 4,
            num_blocks: 2,
            seed,
        }
    }

    /// Width after applying the channel multiplier, never below one.
    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.channel_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if !(self.channel_multiplier > 0.0) || !self.channel_multiplier.is_finite() {
            return bad(format!("channel_multiplier must be positive, got {}", self.channel_multiplier));
        }
        match self.kind {
            GeneratorKind::Mlp => {
                if self.output_shape.len() != 1 || self.output_shape[0] == 0 {
                    return bad(format!("mlp output_shape must be [dims], got {:?}", self.output_shape));
                }
                if self.hidden.iter().any(|&h| h == 0) {
                    return bad("hidden widths must be positive".into());
                }
            }
            GeneratorKind::Resnet => {
                if self.output_shape.len() != 3 || self.output_shape.contains(&0) {
                    return bad(format!("resnet output_shape must be [c, h, w], got {:?}", self.output_shape));
                }
                if self.base_channels == 0 || self.base_resolution == 0 {
                    return bad("base_channels and base_resolution must be positive".into());
                }
                let side = self.base_resolution << self.num_blocks;
                let (h, w) = (self.output_shape[1], self.output_shape[2]);
                if h != side || w != side {
                    return bad(format!(
                        "resnet with base {0}×{0} and {1} blocks produces {side}×{side}, but output_shape asks for {h}×{w}",
                        self.base_resolution, self.num_blocks
                    ));
                }
            }
        }
        Ok(())
    }

    /// Closed-form count of prunable entries (weights and biases).
    pub fn parameter_count(&self) -> usize {
        match self.kind {
            GeneratorKind::Mlp => {
                let mut widths = vec![self.latent_dim];
                widths.extend(self.hidden.iter().map(|&h| self.scaled(h)));
                widths.push(self.output_shape[0]);
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
            GeneratorKind::Resnet => {
                let c = self.scaled(self.base_channels);
                let r0 = self.base_resolution;
                let out_c = self.output_shape[0];
                let projection = self.latent_dim * c * r0 * r0 + c * r0 * r0;
                let conv3 = c * c * 9 + c;
                let conv1 = c * c + c;
                let block = 2 * conv3 + conv1;
                let head = out_c * c * 9 + out_c;
                projection + self.num_blocks * block + head
            }
        }
    }

    pub fn is_image(&self) -> bool {
        self.kind == GeneratorKind::Resnet
    }
}

/// One prunable tensor inside a generator graph: the weight parameter, the
/// binary mask parameter it is multiplied by, and the fans used to
/// initialize it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunableSlot {
    pub layer_id: String,
    pub weight: ParamId,
    pub mask: ParamId,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl PrunableSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A generator compiled to a [`Graph`] whose every weight enters as `θ ⊙ m`.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    init: InitScheme,
    graph: Graph<T>,
    output: NodeId,
    slots: Vec<PrunableSlot>,
    norm_params: Vec<ParamId>,
    taps: Vec<NodeId>,
}

struct Builder<T> {
    graph: Graph<T>,
    slots: Vec<PrunableSlot>,
    norm_params: Vec<ParamId>,
    init: InitScheme,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    /// Register weight and mask parameters; returns the masked weight node.
    fn masked(&mut self, layer_id: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> NodeId {
        let index = self.slots.len() as u64;
        let mut rng = rng::seeded(rng::mix(self.seed, index), 0);
        let value = init_with_rng::<T>(&shape, fan_in, fan_out, self.init, &mut rng);
        let (weight, w_node) = self.graph.param(format!("{layer_id}.weight"), value, false);
        let (mask, m_node) = self.graph.param(format!("{layer_id}.mask"), Tensor::ones(&shape), false);
        self.slots.push(PrunableSlot {
            layer_id,
            weight,
            mask,
            shape,
            fan_in,
            fan_out,
        });
        self.graph.mul(w_node, m_node)
    }

    fn dense(&mut self, name: &str, x: NodeId, inp: usize, out: usize) -> NodeId {
        let w = self.masked(format!("{name}.w"), vec![inp, out], inp, out);
        let b = self.masked(format!("{name}.b"), vec![out], inp, out);
        let y = self.graph.matmul(x, w);
        let y = self.graph.add(y, b);
        self.graph.set_label(y, name);
        y
    }

    fn conv(&mut self, name: &str, x: NodeId, inp: usize, out: usize, k: usize, padding: usize) -> NodeId {
        let w = self.masked(format!("{name}.w"), vec![out, inp, k, k], inp * k * k, out * k * k);
        let b = self.masked(format!("{name}.b"), vec![out], inp * k * k, out * k * k);
        let y = self.graph.conv2d(x, w, 1, padding);
        self.graph.set_label(y, name);
        self.graph.add(y, b)
    }

    fn bn(&mut self, name: &str, x: NodeId, channels: usize) -> NodeId {
        let (g, g_node) = self.graph.param(format!("{name}.gamma"), Tensor::ones(&[channels]), false);
        let (b, b_node) = self.graph.param(format!("{name}.beta"), Tensor::zeros(&[channels]), false);
        self.norm_params.extend([g, b]);
        let y = self
            .graph
            .batchnorm(x, g_node, b_node, BatchNormMode::BatchStats, T::of(1e-5));
        self.graph.set_label(y, name);
        y
    }
}

impl<T: Scalar> Generator<T> {
    pub fn build(spec: &GeneratorSpec, init: InitScheme) -> Result<Self, NetError> {
        spec.validate()?;
        let mut b = Builder {
            graph: Graph::new(),
            slots: Vec::new(),
            norm_params: Vec::new(),
            init,
            seed: spec.seed,
        };
        let z = b.graph.input(LATENT_INPUT, false);
        let output = match spec.kind {
            GeneratorKind::Mlp => {
                let mut x = z;
                let mut width = spec.latent_dim;
                for (i, &h) in spec.hidden.iter().enumerate() {
                    let h = spec.scaled(h);
                    x = b.dense(&format!("fc{i}"), x, width, h);
                    if spec.hidden_norm {
                        x = b.bn(&format!("fc{i}.bn"), x, h);
                    }
                    x = b.graph.relu(x);
                    width = h;
                }
                let y = b.dense("out", x, width, spec.output_shape[0]);
                match spec.output_activation {
                    OutputActivation::Identity => y,
                    OutputActivation::Tanh => b.graph.tanh(y),
                }
            }
            GeneratorKind::Resnet => {
                let c = spec.scaled(spec.base_channels);
                let r0 = spec.base_resolution;
                let y = b.dense("project", z, spec.latent_dim, c * r0 * r0);
                let mut x = b.graph.reshape(y, &[-1, c as isize, r0 as isize, r0 as isize]);
                for i in 0..spec.num_blocks {
                    let h = b.bn(&format!("block{i}.bn1"), x, c);
                    let h = b.graph.relu(h);
                    let h = b.graph.upsample2x(h);
                    let h = b.conv(&format!("block{i}.conv1"), h, c, c, 3, 1);
                    let h = b.bn(&format!("block{i}.bn2"), h, c);
                    let h = b.graph.relu(h);
                    let h = b.conv(&format!("block{i}.conv2"), h, c, c, 3, 1);
                    let s = b.graph.upsample2x(x);
                    let s = b.conv(&format!("block{i}.shortcut"), s, c, c, 1, 0);
                    x = b.graph.add(h, s);
                }
                let h = b.bn("head.bn", x, c);
                let h = b.graph.relu(h);
                let h = b.conv("head.conv", h, c, spec.output_shape[0], 3, 1);
                match spec.output_activation {
                    OutputActivation::Identity => h,
                    OutputActivation::Tanh => b.graph.tanh(h),
                }
            }
        };
        b.graph.mark_output(SAMPLES_OUTPUT, output);
        Ok(Self {
            spec: spec.clone(),
            init,
            graph: b.graph,
            output,
            slots: b.slots,
            norm_params: b.norm_params,
            taps: Vec::new(),
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn slots(&self) -> &[PrunableSlot] {
        &self.slots
    }

    /// Batch-normalization affine parameters (never pruned).
    pub fn norm_params(&self) -> &[ParamId] {
        &self.norm_params
    }

    /// Prunable entries counted over the built layers.
    pub fn parameter_count(&self) -> usize {
        self.slots.iter().map(PrunableSlot::len).sum()
    }

    /// Append a frozen feature extractor reading the generator output. Its
    /// tap nodes become available through [`Generator::taps`].
    pub fn attach_extractor(&mut self, extractor: &FeatureExtractor<T>) -> Result<(), NetError> {
        if !self.taps.is_empty() {
            return Err(NetError::InvalidSpec("an extractor is already attached".into()));
        }
        if extractor.spec().input_shape != self.spec.output_shape {
            return Err(NetError::InvalidSpec(format!(
                "extractor expects samples of shape {:?}, generator produces {:?}",
                extractor.spec().input_shape,
                self.spec.output_shape
            )));
        }
        self.taps = extractor.attach(&mut self.graph, self.output);
        Ok(())
    }

    pub fn taps(&self) -> &[NodeId] {
        &self.taps
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.slots.iter().map(|s| self.graph.param_value(s.weight))
    }

    pub fn mask_tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.slots.iter().map(|s| self.graph.param_value(s.mask))
    }

    /// Run the generator alone on a latent batch `[B, latent_dim]`.
    pub fn sample(&mut self, z: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut feeds = HashMap::with_capacity(1);
        feeds.insert(LATENT_INPUT.to_string(), z.clone());
        Ok(self.graph.forward_to(&feeds, self.output)?.clone())
    }

    /// Forward the generator and any attached extractor.
    pub fn forward_all(&mut self, z: &Tensor<T>) -> Result<(), NetError> {
        let mut feeds = HashMap::with_capacity(1);
        feeds.insert(LATENT_INPUT.to_string(), z.clone());
        let last = self.taps.iter().copied().max().unwrap_or(self.output).max(self.output);
        self.graph.forward_to(&feeds, last)?;
        Ok(())
    }

    /// Draw `count` latent vectors from `N(0, I)`.
    pub fn latents(&self, rng: &mut impl rand::Rng, count: usize) -> Tensor<T> {
        rng::standard_normal(rng, &[count, self.spec.latent_dim])
    }
}
