//! Network construction, the offline fusion pass and inference.
//!
//! A network is described as a flat list of [`RawLayerSpec`]s the way a
//! training framework would export it: convolutions, batch norms and sign
//! activations as separate entries. [`build`] groups every
//! `conv/dense -> batchnorm -> binarize` run into a single thresholded layer
//! and checks that shapes chain.

mod format;
pub mod zoo;

pub use format::{float32_size, load, save, MAGIC, VERSION};

use std::time::{Duration, Instant};

use crate::error::{dim_err, Error, Result};
use crate::layers::{
    binary_dense, binary_maxpool, first_layer_conv, fused_binary_conv, output_conv, output_conv_bytes, output_dense,
    BnParams, ConvGeometry, FirstConvLayer, FusedConvLayer, OutputConvLayer, PoolGeometry, DEFAULT_PACK_THRESHOLD,
};
use crate::tensor::{BitTensor, ByteTensor, FloatTensor, Shape};

/// One layer as exported by a training framework. Weights are ±1 values in
/// `(out, kernel_h, kernel_w, in)` order.
#[derive(Debug, Clone, PartialEq)]
pub enum RawLayerSpec {
    Conv { geometry: ConvGeometry, weights: Vec<f32>, bias: Option<Vec<f32>> },
    Dense { in_features: usize, out_features: usize, weights: Vec<f32>, bias: Option<Vec<f32>> },
    Pool(PoolGeometry),
    BatchNorm(BnParams),
    Binarize,
    OutputConv { geometry: ConvGeometry, weights: Vec<f32>, bias: Option<Vec<f32>> },
}

/// Geometry, ±1 weights and optional bias of a weighted layer.
pub type WeightedParts<'a> = (ConvGeometry, &'a [f32], Option<&'a [f32]>);

impl RawLayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            RawLayerSpec::Conv { .. } => "conv",
            RawLayerSpec::Dense { .. } => "dense",
            RawLayerSpec::Pool(_) => "pool",
            RawLayerSpec::BatchNorm(_) => "batchnorm",
            RawLayerSpec::Binarize => "binarize",
            RawLayerSpec::OutputConv { .. } => "output-conv",
        }
    }

    /// Geometry, weights and bias of a weighted layer.
    pub fn weighted_parts(&self) -> Option<WeightedParts<'_>> {
        match self {
            RawLayerSpec::Conv { geometry, weights, bias } | RawLayerSpec::OutputConv { geometry, weights, bias } => {
                Some((*geometry, weights, bias.as_deref()))
            }
            RawLayerSpec::Dense { in_features, out_features, weights, bias } => {
                Some((ConvGeometry::dense(*in_features, *out_features), weights, bias.as_deref()))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    FirstConv,
    Conv,
    Dense,
    Pool,
    Output,
    OutputDense,
}

/// A run of raw specs that becomes one executable layer.
#[derive(Debug, Clone)]
pub struct Stage<'a> {
    pub kind: StageKind,
    pub main: &'a RawLayerSpec,
    pub bn: Option<&'a BnParams>,
}

/// Groups raw specs into executable stages without touching any numbers.
pub fn group_stages(specs: &[RawLayerSpec]) -> Result<Vec<Stage<'_>>> {
    if specs.is_empty() {
        return Err(Error::Graph("network has no layers".into()));
    }
    let mut stages: Vec<Stage> = Vec::new();
    let mut i = 0;
    while i < specs.len() {
        let spec = &specs[i];
        let first = stages.is_empty();
        if let Some(last) = stages.last() {
            if matches!(last.kind, StageKind::Output | StageKind::OutputDense) {
                return Err(Error::Graph(format!("{} at index {i} follows the real-valued output layer", spec.kind_name())));
            }
        }
        i += 1;
        let stage = match spec {
            RawLayerSpec::BatchNorm(_) | RawLayerSpec::Binarize => {
                return Err(Error::Graph(format!("dangling {} at index {}", spec.kind_name(), i - 1)));
            }
            RawLayerSpec::Pool(_) => {
                if first {
                    return Err(Error::Graph("pooling cannot consume the 8-bit input".into()));
                }
                Stage { kind: StageKind::Pool, main: spec, bn: None }
            }
            RawLayerSpec::Conv { .. } | RawLayerSpec::Dense { .. } | RawLayerSpec::OutputConv { .. } => {
                let bn = match specs.get(i) {
                    Some(RawLayerSpec::BatchNorm(bn)) => {
                        i += 1;
                        Some(bn)
                    }
                    _ => None,
                };
                let binarized = matches!(specs.get(i), Some(RawLayerSpec::Binarize));
                if binarized {
                    i += 1;
                }
                let kind = match (spec, binarized) {
                    (RawLayerSpec::OutputConv { .. }, true) => {
                        return Err(Error::Graph(format!("output-conv at index {} cannot be binarized", i - 2)));
                    }
                    (RawLayerSpec::Conv { .. }, true) if first => StageKind::FirstConv,
                    (RawLayerSpec::Conv { .. }, true) => StageKind::Conv,
                    (RawLayerSpec::Dense { .. }, _) if first => {
                        return Err(Error::Graph("a dense layer cannot consume the 8-bit input".into()));
                    }
                    (RawLayerSpec::Dense { .. }, true) => StageKind::Dense,
                    (RawLayerSpec::Dense { .. }, false) => StageKind::OutputDense,
                    _ => StageKind::Output,
                };
                Stage { kind, main: spec, bn }
            }
        };
        stages.push(stage);
    }
    match stages.last().map(|s| s.kind) {
        Some(StageKind::Output | StageKind::OutputDense) => Ok(stages),
        _ => Err(Error::Graph("network must end in a real-valued output layer".into())),
    }
}

/// An executable layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    FirstConv(FirstConvLayer),
    Conv(FusedConvLayer),
    Dense(FusedConvLayer),
    Pool(PoolGeometry),
    Output(OutputConvLayer),
    OutputDense(OutputConvLayer),
}

impl Layer {
    pub fn kind(&self) -> StageKind {
        match self {
            Layer::FirstConv(_) => StageKind::FirstConv,
            Layer::Conv(_) => StageKind::Conv,
            Layer::Dense(_) => StageKind::Dense,
            Layer::Pool(_) => StageKind::Pool,
            Layer::Output(_) => StageKind::Output,
            Layer::OutputDense(_) => StageKind::OutputDense,
        }
    }

    pub fn is_weighted(&self) -> bool {
        !matches!(self, Layer::Pool(_))
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::FirstConv(l) => l.geometry().output_shape(input),
            Layer::Conv(l) => l.geometry().output_shape(input),
            Layer::Output(l) => l.geometry().output_shape(input),
            Layer::Dense(l) => l.geometry().output_shape(input.flattened()),
            Layer::OutputDense(l) => l.geometry().output_shape(input.flattened()),
            Layer::Pool(g) => {
                g.validate()?;
                Ok(g.output_shape(input))
            }
        }
    }

    pub fn forward(&self, input: &Activation) -> Result<Activation> {
        Ok(match (self, input) {
            (Layer::FirstConv(l), Activation::Bytes(x)) => Activation::Bits(first_layer_conv(x, l)?),
            (Layer::Output(l), Activation::Bytes(x)) => Activation::Real(output_conv_bytes(x, l)?),
            (Layer::Conv(l), Activation::Bits(x)) => Activation::Bits(fused_binary_conv(x, l)?),
            (Layer::Dense(l), Activation::Bits(x)) => Activation::Bits(binary_dense(x, l)?),
            (Layer::Pool(g), Activation::Bits(x)) => Activation::Bits(binary_maxpool(x, g)?),
            (Layer::Output(l), Activation::Bits(x)) => Activation::Real(output_conv(x, l)?),
            (Layer::OutputDense(l), Activation::Bits(x)) => Activation::Real(output_dense(x, l)?),
            (layer, act) => {
                return Err(Error::Graph(format!("{:?} layer cannot consume a {} activation", layer.kind(), act.kind_name())))
            }
        })
    }
}

/// Data flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Bytes(ByteTensor),
    Bits(BitTensor),
    Real(FloatTensor),
}

impl Activation {
    pub fn shape(&self) -> Shape {
        match self {
            Activation::Bytes(t) => t.shape(),
            Activation::Bits(t) => t.shape(),
            Activation::Real(t) => t.shape(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Activation::Bytes(_) => "byte",
            Activation::Bits(_) => "bit",
            Activation::Real(_) => "real",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Input-channel bound for the integrated packing plan.
    pub pack_threshold: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { pack_threshold: DEFAULT_PACK_THRESHOLD }
    }
}

/// A linear chain of executable layers. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

fn pack_weights(index: usize, geometry: &ConvGeometry, weights: &[f32]) -> Result<BitTensor> {
    geometry.validate()?;
    BitTensor::pack_channels(geometry.weight_shape(), weights).map_err(|e| match e {
        Error::Dimension(m) => Error::Dimension(format!("layer {index} weights: {m}")),
        Error::InvalidValue { index: i, value } => {
            Error::InvalidParameter(format!("layer {index} weight {i} is {value}, expected -1 or +1"))
        }
        other => other,
    })
}

/// Folds a binary convolution or dense layer with its batch norm into a
/// thresholded layer.
pub fn fuse(conv: &RawLayerSpec, bn: Option<&BnParams>) -> Result<FusedConvLayer> {
    fuse_at(0, conv, bn, DEFAULT_PACK_THRESHOLD)
}

fn fuse_at(index: usize, conv: &RawLayerSpec, bn: Option<&BnParams>, pack_threshold: usize) -> Result<FusedConvLayer> {
    let (geometry, weights, bias) = conv
        .weighted_parts()
        .ok_or_else(|| Error::Graph(format!("cannot fuse a {} layer", conv.kind_name())))?;
    let out = geometry.out_channels;
    let bias = bias.map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; out]);
    let bn = bn.cloned().unwrap_or_else(|| BnParams::identity(out));
    let packed = pack_weights(index, &geometry, weights)?;
    FusedConvLayer::new(index, geometry, packed, bias, bn, pack_threshold)
}

/// Builds an executable graph from raw specs, fusing every
/// conv/dense + batchnorm + binarize run.
pub fn build(specs: &[RawLayerSpec], input_shape: Shape) -> Result<NetworkGraph> {
    build_with(specs, input_shape, BuildOptions::default())
}

pub fn build_with(specs: &[RawLayerSpec], input_shape: Shape, options: BuildOptions) -> Result<NetworkGraph> {
    let stages = group_stages(specs)?;
    let mut layers = Vec::with_capacity(stages.len());
    for (index, stage) in stages.iter().enumerate() {
        let layer = match stage.kind {
            StageKind::Pool => match stage.main {
                RawLayerSpec::Pool(g) => Layer::Pool(*g),
                _ => unreachable!("pool stage holds a pool spec"),
            },
            StageKind::Conv => Layer::Conv(fuse_at(index, stage.main, stage.bn, options.pack_threshold)?),
            StageKind::Dense => Layer::Dense(fuse_at(index, stage.main, stage.bn, options.pack_threshold)?),
            StageKind::FirstConv => {
                let (geometry, weights, bias) = stage.main.weighted_parts().expect("weighted stage");
                let out = geometry.out_channels;
                let bias = bias.map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; out]);
                let bn = stage.bn.cloned().unwrap_or_else(|| BnParams::identity(out));
                Layer::FirstConv(FirstConvLayer::new(index, geometry, pack_weights(index, &geometry, weights)?, bias, bn)?)
            }
            StageKind::Output | StageKind::OutputDense => {
                let (geometry, weights, bias) = stage.main.weighted_parts().expect("weighted stage");
                let bias = bias.map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; geometry.out_channels]);
                let l = OutputConvLayer::new(geometry, pack_weights(index, &geometry, weights)?, bias, stage.bn.cloned())?;
                if stage.kind == StageKind::Output {
                    Layer::Output(l)
                } else {
                    Layer::OutputDense(l)
                }
            }
        };
        layers.push(layer);
    }
    NetworkGraph::from_layers(input_shape, layers)
}

impl NetworkGraph {
    /// Assembles already-built layers, checking structure and the shape chain.
    pub fn from_layers(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        input_shape.validate()?;
        if layers.is_empty() {
            return Err(Error::Graph("network has no layers".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape;
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let ok_position = match layer.kind() {
                StageKind::FirstConv => i == 0,
                StageKind::Output => i == last,
                StageKind::OutputDense => i == last && i > 0,
                StageKind::Conv | StageKind::Dense | StageKind::Pool => i > 0 && i < last,
            };
            if !ok_position {
                return Err(Error::Graph(format!("{:?} layer cannot appear at position {i} of {}", layer.kind(), layers.len())));
            }
            shape = layer
                .output_shape(shape)
                .map_err(|e| Error::Graph(format!("shape chain breaks at layer {i} ({:?}): {e}", layer.kind())))?;
            shapes.push(shape);
        }
        Ok(NetworkGraph { input_shape, layers, shapes })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of every layer for a batch of `input_shape.n` images.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("graph has layers")
    }

    /// Mutable layer access for fault-injection tests.
    #[doc(hidden)]
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Recovers the unfused spec list the graph was built from.
    pub fn to_raw_specs(&self) -> Vec<RawLayerSpec> {
        let signs = |w: &BitTensor| w.unpack_channels().into_iter().map(f32::from).collect::<Vec<_>>();
        let mut specs = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::FirstConv(l) => {
                    specs.push(RawLayerSpec::Conv { geometry: *l.geometry(), weights: signs(l.weights()), bias: Some(l.bias().to_vec()) });
                    specs.push(RawLayerSpec::BatchNorm(l.bn().clone()));
                    specs.push(RawLayerSpec::Binarize);
                }
                Layer::Conv(l) | Layer::Dense(l) => {
                    let g = *l.geometry();
                    specs.push(if matches!(layer, Layer::Conv(_)) {
                        RawLayerSpec::Conv { geometry: g, weights: signs(l.weights()), bias: Some(l.bias().to_vec()) }
                    } else {
                        RawLayerSpec::Dense {
                            in_features: g.in_channels,
                            out_features: g.out_channels,
                            weights: signs(l.weights()),
                            bias: Some(l.bias().to_vec()),
                        }
                    });
                    specs.push(RawLayerSpec::BatchNorm(l.bn().clone()));
                    specs.push(RawLayerSpec::Binarize);
                }
                Layer::Pool(g) => specs.push(RawLayerSpec::Pool(*g)),
                Layer::Output(l) | Layer::OutputDense(l) => {
                    let g = *l.geometry();
                    specs.push(if matches!(layer, Layer::Output(_)) {
                        RawLayerSpec::OutputConv { geometry: g, weights: signs(l.weights()), bias: Some(l.bias().to_vec()) }
                    } else {
                        RawLayerSpec::Dense {
                            in_features: g.in_channels,
                            out_features: g.out_channels,
                            weights: signs(l.weights()),
                            bias: Some(l.bias().to_vec()),
                        }
                    });
                    if let Some(bn) = l.bn() {
                        specs.push(RawLayerSpec::BatchNorm(bn.clone()));
                    }
                }
            }
        }
        specs
    }

    fn check_input(&self, img: &ByteTensor) -> Result<()> {
        let (s, e) = (img.shape(), self.input_shape);
        if (s.h, s.w, s.c) != (e.h, e.w, e.c) {
            return dim_err(format!("input image is {s}, model expects {}x{}x{} per image", e.h, e.w, e.c));
        }
        Ok(())
    }

    /// Runs the network and returns the real-valued output. Any batch size is
    /// accepted as long as the per-image shape matches.
    pub fn infer(&self, img: &ByteTensor) -> Result<FloatTensor> {
        self.infer_profiled(img).map(|(out, _)| out)
    }

    /// Like [`infer`](Self::infer), also returning the wall time of each layer.
    pub fn infer_profiled(&self, img: &ByteTensor) -> Result<(FloatTensor, Vec<Duration>)> {
        self.check_input(img)?;
        let mut times = Vec::with_capacity(self.layers.len());
        let mut act = Activation::Bytes(img.clone());
        for layer in &self.layers {
            let start = Instant::now();
            act = layer.forward(&act)?;
            times.push(start.elapsed());
        }
        match act {
            Activation::Real(t) => Ok((t, times)),
            other => Err(Error::Graph(format!("network produced a {} activation", other.kind_name()))),
        }
    }

    /// Every intermediate activation, one per layer.
    pub fn run_layers(&self, img: &ByteTensor) -> Result<Vec<Activation>> {
        self.check_input(img)?;
        let mut outs: Vec<Activation> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = match outs.last() {
                Some(prev) => layer.forward(prev)?,
                None => layer.forward(&Activation::Bytes(img.clone()))?,
            };
            outs.push(next);
        }
        Ok(outs)
    }
}
