use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, NodeId, Tensor};
use crate::nets::{init_with_rng, InitScheme, NetError};
use crate::rng;
use crate::scalar::Scalar;

pub const EXTRACTOR_INPUT: &str = "x";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Strided convolutions over `[C, H, W]` images.
    Conv,
    /// Fully connected layers over flat vectors.
    Dense,
}

/// Frozen random network used as the feature map of the moment-matching loss.
///
/// Layer `i` (1-based) is a convolution or dense layer followed by ReLU; tap
/// `i` exposes its output. Tap `0` is the raw input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub kind: ExtractorKind,
    pub channels: Vec<usize>,
    pub taps: Vec<usize>,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub bias_std: f64,
    pub seed: u64,
}

impl FeatureExtractorSpec {
    /// Four conv layers `[16, 32, 64, 64]`, all four post-ReLU taps.
    pub fn image_default(input_shape: &[usize], seed: u64) -> Self {
        Self {
            kind: ExtractorKind::Conv,
            channels: vec![16, 32, 64, 64],
            taps: vec![1, 2, 3, 4],
            input_shape: input_shape.to_vec(),
            bias_std: 0.0,
            seed,
        }
    }

    /// Raw coordinates plus two random ReLU layers of width 128.
    pub fn point_default(dims: usize, seed: u64) -> Self {
        Self {
            kind: ExtractorKind::Dense,
            channels: vec![128, 128],
            taps: vec![0, 1, 2],
            input_shape: vec![dims],
            bias_std: 1.0,
            seed,
        }
    }

    /// A single raw-input tap; turns feature matching into plain moment matching.
    pub fn identity(input_shape: &[usize]) -> Self {
        Self {
            kind: ExtractorKind::Dense,
            channels: Vec::new(),
            taps: vec![0],
            input_shape: input_shape.to_vec(),
            bias_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.taps.is_empty() {
            return bad("extractor needs at least one tap".into());
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("taps must be strictly increasing, got {:?}", self.taps));
        }
        if let Some(&last) = self.taps.last() {
            if last > self.channels.len() {
                return bad(format!("tap {last} exceeds the {} extractor layers", self.channels.len()));
            }
        }
        if self.channels.contains(&0) || self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad("extractor widths and input shape must be positive".into());
        }
        if !(self.bias_std >= 0.0) {
            return bad(format!("bias_std must be non-negative, got {}", self.bias_std));
        }
        match self.kind {
            ExtractorKind::Dense => Ok(()),
            ExtractorKind::Conv => {
                if self.input_shape.len() != 3 {
                    return bad(format!("conv extractor needs [c, h, w] input, got {:?}", self.input_shape));
                }
                self.layer_geometry().map(|_| ())
            }
        }
    }

    /// `(kernel, stride, padding)` per conv layer and the resulting `[c, h, w]`.
    fn layer_geometry(&self) -> Result<Vec<(usize, usize, usize, [usize; 3])>, NetError> {
        let [mut c, mut h, mut w] = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &oc) in self.channels.iter().enumerate() {
            let (k, s, p) = if i == 0 { (3, 1, 1) } else { (4, 2, 1) };
            let extent = |n: usize| crate::engine::kernels::ConvGeometry::out_extent(n, k, s, p);
            match (extent(h), extent(w)) {
                (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(NetError::InvalidSpec(format!(
                        "extractor layer {} cannot downsample a {h}×{w} map",
                        i + 1
                    )))
                }
            }
            c = oc;
            out.push((k, s, p, [c, h, w]));
        }
        let _ = c;
        Ok(out)
    }

    /// Flattened width of every tap, in tap order.
    pub fn tap_widths(&self) -> Result<Vec<usize>, NetError> {
        self.validate()?;
        let input: usize = self.input_shape.iter().product();
        let layer_widths: Vec<usize> = match self.kind {
            ExtractorKind::Dense => self.channels.clone(),
            ExtractorKind::Conv => self
                .layer_geometry()?
                .iter()
                .map(|(_, _, _, s)| s.iter().product())
                .collect(),
        };
        Ok(self
            .taps
            .iter()
            .map(|&t| if t == 0 { input } else { layer_widths[t - 1] })
            .collect())
    }
}

#[derive(Debug, Clone)]
struct Layer<T> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    stride: usize,
    padding: usize,
}

/// Frozen feature extractor. Its weights enter graphs as constants, so no
/// gradient is ever computed for them.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    spec: FeatureExtractorSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn build(spec: &FeatureExtractorSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.channels.len());
        match spec.kind {
            ExtractorKind::Dense => {
                let mut width: usize = spec.input_shape.iter().product();
                for (i, &out) in spec.channels.iter().enumerate() {
                    let mut r = rng::seeded(rng::mix(spec.seed, i as u64), 0);
                    let weight = init_with_rng(&[width, out], width, out, InitScheme::KaimingNormal, &mut r);
                    let bias = (spec.bias_std > 0.0)
                        .then(|| rng::standard_normal::<T>(&mut r, &[out]).scale(T::of(spec.bias_std)));
                    layers.push(Layer {
                        weight,
                        bias,
                        stride: 1,
                        padding: 0,
                    });
                    width = out;
                }
            }
            ExtractorKind::Conv => {
                let mut c = spec.input_shape[0];
                for (i, (k, s, p, shape)) in spec.layer_geometry()?.into_iter().enumerate() {
                    let oc = shape[0];
                    let mut r = rng::seeded(rng::mix(spec.seed, i as u64), 0);
                    let weight = init_with_rng(&[oc, c, k, k], c * k * k, oc * k * k, InitScheme::KaimingNormal, &mut r);
                    let bias = (spec.bias_std > 0.0)
                        .then(|| rng::standard_normal::<T>(&mut r, &[oc]).scale(T::of(spec.bias_std)));
                    layers.push(Layer {
                        weight,
                        bias,
                        stride: s,
                        padding: p,
                    });
                    c = oc;
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    /// Append the extractor to `graph`, reading samples from node `x`
    /// (shape `[B, input_shape..]`). Returns one `[B, F]` node per tap.
    pub fn attach(&self, graph: &mut Graph<T>, x: NodeId) -> Vec<NodeId> {
        let mut taps = Vec::with_capacity(self.spec.taps.len());
        let mut h = x;
        let flat = |g: &mut Graph<T>, n: NodeId, width: usize| g.reshape(n, &[-1, width as isize]);
        let widths = self.spec.tap_widths().expect("spec validated at build");
        let mut next = 0;
        if self.spec.taps.first() == Some(&0) {
            taps.push(flat(graph, h, widths[0]));
            next = 1;
        }
        if self.spec.kind == ExtractorKind::Dense && self.spec.input_shape.len() > 1 {
            h = flat(graph, h, self.spec.input_shape.iter().product());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if next >= self.spec.taps.len() {
                break;
            }
            let w = graph.constant(layer.weight.clone());
            h = match self.spec.kind {
                ExtractorKind::Dense => graph.matmul(h, w),
                ExtractorKind::Conv => graph.conv2d(h, w, layer.stride, layer.padding),
            };
            graph.set_label(h, format!("extractor.layer{}", i + 1));
            if let Some(b) = &layer.bias {
                let b = graph.constant(b.clone());
                h = graph.add(h, b);
            }
            h = graph.relu(h);
            if self.spec.taps[next] == i + 1 {
                taps.push(flat(graph, h, widths[next]));
                next += 1;
            }
        }
        taps
    }

    /// Tap activations for a batch `[B, input_shape..]`, each `[B, F]`.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetError> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(NetError::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        let mut graph = Graph::new();
        let input = graph.input(EXTRACTOR_INPUT, false);
        let taps = self.attach(&mut graph, input);
        let mut feeds = HashMap::with_capacity(1);
        feeds.insert(EXTRACTOR_INPUT.to_string(), x.clone());
        let last = *taps.iter().max().expect("at least one tap");
        graph.forward_to(&feeds, last)?;
        Ok(taps
            .iter()
            .map(|&t| graph.value(t).expect("evaluated").clone())
            .collect())
    }

    /// Extract in chunks of `batch` rows and stack the results.
    pub fn extract_batched(&self, x: &Tensor<T>, batch: usize) -> Result<Vec<Tensor<T>>, NetError> {
        let rows = x.shape().first().copied().unwrap_or(0);
        let batch = batch.max(1);
        let mut parts: Vec<Vec<Tensor<T>>> = Vec::new();
        let mut start = 0;
        while start < rows {
            let end = (start + batch).min(rows);
            parts.push(self.extract(&x.slice_rows(start, end))?);
            start = end;
        }
        let taps = self.spec.taps.len();
        (0..taps)
            .map(|t| {
                let column: Vec<Tensor<T>> = parts.iter().map(|p| p[t].clone()).collect();
                Tensor::concat_rows(&column).map_err(NetError::from)
            })
            .collect()
    }
}
