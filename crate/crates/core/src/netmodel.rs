//! Network description, ingestion, pruning and quantization.
//!
//! A network is read from a JSON manifest naming its layers and the raw
//! little-endian f32 tensor files holding weights and biases. Geometry-only
//! manifests (no weight files) are valid and are used for cycle studies.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::layout::{tile_tensor, LayoutError, TiledTensor, TILE_LEN};
use crate::numerics::{quantize, round_half_away, LayerQuant, QVal, QuantError};

pub const MODEL_FORMAT: &str = "zskip-model/1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: {msg}")]
    Layer { layer: String, msg: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("layer {layer}: {source}")]
    Quant { layer: String, source: QuantError },
    #[error("image: {0}")]
    Ingest(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn layer_err(layer: &str, msg: impl Into<String>) -> NetError {
    NetError::Layer {
        layer: layer.to_string(),
        msg: msg.into(),
    }
}

/// How a layer's weight scale is chosen at quantization time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// 127 / max|w| over the layer.
    MaxAbs,
    /// Use `LayerQuant::weight_scale` as given.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub quant: LayerQuant,
    pub scale_mode: ScaleMode,
}

impl ConvSpec {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Flat index of kernel value (i, j) of filter `o`, input channel `c`.
    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, i: usize, j: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + i) * self.kernel + j
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub quant: LayerQuant,
    pub scale_mode: ScaleMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Pad { border: usize },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    FullyConnected(FcSpec),
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Pad { .. } => "pad",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::FullyConnected(_) => "fc",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.weight_count(),
            LayerSpec::FullyConnected(f) => f.in_features * f.out_features,
            _ => 0,
        }
    }

    pub fn out_features(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv(c) => Some(c.out_channels),
            LayerSpec::FullyConnected(f) => Some(f.out_features),
            _ => None,
        }
    }

    pub fn quant(&self) -> Option<&LayerQuant> {
        match self {
            LayerSpec::Conv(c) => Some(&c.quant),
            LayerSpec::FullyConnected(f) => Some(&f.quant),
            _ => None,
        }
    }

    fn quant_mut(&mut self) -> Option<(&mut LayerQuant, ScaleMode)> {
        match self {
            LayerSpec::Conv(c) => Some((&mut c.quant, c.scale_mode)),
            LayerSpec::FullyConnected(f) => Some((&mut f.quant, f.scale_mode)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output shape of `spec` applied to `input`.
pub fn output_shape(name: &str, spec: &LayerSpec, input: Shape) -> Result<Shape, NetError> {
    match (spec, input) {
        (
            LayerSpec::Conv(c),
            Shape::Spatial {
                channels,
                height,
                width,
            },
        ) => {
            if !(1..=4).contains(&c.kernel) {
                return Err(layer_err(name, format!("kernel {} not in 1..=4", c.kernel)));
            }
            if c.in_channels != channels {
                return Err(layer_err(
                    name,
                    format!("expects {} input channels, got {}", c.in_channels, channels),
                ));
            }
            if c.out_channels == 0 {
                return Err(layer_err(name, "zero output channels"));
            }
            if height < c.kernel || width < c.kernel {
                return Err(layer_err(
                    name,
                    format!("input {height}x{width} smaller than kernel {}", c.kernel),
                ));
            }
            Ok(Shape::Spatial {
                channels: c.out_channels,
                height: height - c.kernel + 1,
                width: width - c.kernel + 1,
            })
        }
        (
            LayerSpec::Pad { border },
            Shape::Spatial {
                channels,
                height,
                width,
            },
        ) => Ok(Shape::Spatial {
            channels,
            height: height + 2 * border,
            width: width + 2 * border,
        }),
        (
            LayerSpec::MaxPool { window, stride },
            Shape::Spatial {
                channels,
                height,
                width,
            },
        ) => {
            let (wh, ww) = *window;
            let (sh, sw) = *stride;
            if !(1..=4).contains(&wh) || !(1..=4).contains(&ww) {
                return Err(layer_err(name, format!("window {wh}x{ww} outside 1..=4")));
            }
            if sh == 0 || sw == 0 {
                return Err(layer_err(name, "stride must be positive"));
            }
            if height < wh || width < ww {
                return Err(layer_err(name, "input smaller than pooling window"));
            }
            Ok(Shape::Spatial {
                channels,
                height: (height - wh) / sh + 1,
                width: (width - ww) / sw + 1,
            })
        }
        (LayerSpec::Flatten, s) => Ok(Shape::Flat(s.len())),
        (LayerSpec::FullyConnected(f), s) => {
            if f.in_features != s.len() {
                return Err(layer_err(
                    name,
                    format!("expects {} input features, got {}", f.in_features, s.len()),
                ));
            }
            Ok(Shape::Flat(f.out_features))
        }
        (spec, Shape::Flat(_)) => Err(layer_err(
            name,
            format!("{} layer cannot follow a flattened activation", spec.kind_name()),
        )),
    }
}

/// Weights and biases attached to a conv or fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerWeights {
    Real {
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    },
    /// Sign-magnitude weights and biases folded onto the accumulator grid.
    Quantized { weights: Vec<QVal>, bias: Vec<i32> },
}

impl LayerWeights {
    pub fn nonzero_count(&self) -> usize {
        match self {
            LayerWeights::Real { weights, .. } => weights.iter().filter(|w| **w != 0.0).count(),
            LayerWeights::Quantized { weights, .. } => {
                weights.iter().filter(|w| !w.is_zero()).count()
            }
        }
    }

    pub fn quantized(&self) -> Option<(&[QVal], &[i32])> {
        match self {
            LayerWeights::Quantized { weights, bias } => Some((weights, bias)),
            LayerWeights::Real { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    /// Real-to-QVal scale applied to the (mean-subtracted) input image.
    pub input_scale: f64,
    /// Per-channel mean subtracted at ingestion.
    pub input_mean: Vec<f32>,
    pub layers: Vec<Layer>,
    pub weights: Vec<Option<LayerWeights>>,
}

impl NetworkModel {
    /// Builds a model and checks the shape chain.
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>) -> Result<Self, NetError> {
        let n = layers.len();
        let m = NetworkModel {
            input,
            input_scale: 1.0,
            input_mean: vec![0.0; input.0],
            layers,
            weights: vec![None; n],
        };
        m.shapes()?;
        Ok(m)
    }

    pub fn input_shape(&self) -> Shape {
        Shape::Spatial {
            channels: self.input.0,
            height: self.input.1,
            width: self.input.2,
        }
    }

    /// Input shape of every layer followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, NetError> {
        let mut shapes = vec![self.input_shape()];
        for l in &self.layers {
            let next = output_shape(&l.name, &l.spec, *shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().zip(&self.weights).all(|(l, w)| {
            l.spec.weight_count() == 0 || matches!(w, Some(LayerWeights::Quantized { .. }))
        })
    }

    /// Quantized weights and biases of layer `idx`.
    pub fn quantized_weights(&self, idx: usize) -> Option<(&[QVal], &[i32])> {
        self.weights.get(idx)?.as_ref()?.quantized()
    }

    /// Activation scale entering each layer, plus the output scale.
    pub fn activation_scales(&self) -> Vec<f64> {
        let mut s = vec![self.input_scale];
        for l in &self.layers {
            let cur = *s.last().unwrap();
            let next = match l.spec.quant() {
                Some(q) => cur * q.weight_scale / (1u64 << q.act_shift) as f64,
                None => cur,
            };
            s.push(next);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let doc = ModelFile {
            format: MODEL_FORMAT.to_string(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&doc)?;
        fs::write(path, text).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    model: NetworkModel,
}

// ---------------------------------------------------------------------------
// Manifest loading

#[derive(Deserialize)]
struct Manifest {
    input: [usize; 3],
    #[serde(default)]
    input_scale: Option<f64>,
    #[serde(default)]
    input_mean: Option<Vec<f32>>,
    layers: Vec<ManifestLayer>,
}

#[derive(Deserialize)]
struct ManifestLayer {
    name: String,
    kind: String,
    #[serde(default)]
    params: Value,
    #[serde(default)]
    weights_file: Option<String>,
    #[serde(default)]
    bias_file: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    #[serde(default)]
    act_shift: u32,
    #[serde(default = "yes")]
    relu: bool,
    #[serde(default)]
    weight_scale: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FcParams {
    in_features: usize,
    out_features: usize,
    #[serde(default)]
    act_shift: u32,
    #[serde(default = "yes")]
    relu: bool,
    #[serde(default)]
    weight_scale: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PadParams {
    border: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolParams {
    window: [usize; 2],
    stride: [usize; 2],
}

fn yes() -> bool {
    true
}

fn quant_of(
    name: &str,
    act_shift: u32,
    relu: bool,
    scale: Option<f64>,
) -> Result<(LayerQuant, ScaleMode), NetError> {
    let (ws, mode) = match scale {
        Some(s) => (s, ScaleMode::Fixed),
        None => (1.0, ScaleMode::MaxAbs),
    };
    let q = LayerQuant::new(ws, act_shift, relu).map_err(|source| NetError::Quant {
        layer: name.to_string(),
        source,
    })?;
    Ok((q, mode))
}

fn parse_params<T: for<'de> Deserialize<'de>>(name: &str, params: &Value) -> Result<T, NetError> {
    let v = if params.is_null() {
        Value::Object(Default::default())
    } else {
        params.clone()
    };
    serde_json::from_value(v).map_err(|e| layer_err(name, format!("bad params: {e}")))
}

fn parse_layer(ml: &ManifestLayer) -> Result<LayerSpec, NetError> {
    let name = ml.name.as_str();
    Ok(match ml.kind.to_ascii_lowercase().as_str() {
        "conv" => {
            let p: ConvParams = parse_params(name, &ml.params)?;
            let (quant, scale_mode) = quant_of(name, p.act_shift, p.relu, p.weight_scale)?;
            LayerSpec::Conv(ConvSpec {
                in_channels: p.in_channels,
                out_channels: p.out_channels,
                kernel: p.kernel,
                quant,
                scale_mode,
            })
        }
        "fc" | "fullyconnected" => {
            let p: FcParams = parse_params(name, &ml.params)?;
            let (quant, scale_mode) = quant_of(name, p.act_shift, p.relu, p.weight_scale)?;
            LayerSpec::FullyConnected(FcSpec {
                in_features: p.in_features,
                out_features: p.out_features,
                quant,
                scale_mode,
            })
        }
        "pad" => {
            let p: PadParams = parse_params(name, &ml.params)?;
            LayerSpec::Pad { border: p.border }
        }
        "maxpool" => {
            let p: PoolParams = parse_params(name, &ml.params)?;
            LayerSpec::MaxPool {
                window: (p.window[0], p.window[1]),
                stride: (p.stride[0], p.stride[1]),
            }
        }
        "flatten" => LayerSpec::Flatten,
        other => return Err(layer_err(name, format!("unknown layer kind {other:?}"))),
    })
}

/// Reads a raw little-endian f32 tensor file of exactly `count` values.
pub fn read_f32_file(path: &Path, count: usize) -> Result<Vec<f32>, NetError> {
    let bytes = fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() != count * 4 {
        return Err(NetError::Manifest(format!(
            "{} holds {} bytes, expected {} f32 values",
            path.display(),
            bytes.len(),
            count
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Writes a raw little-endian f32 tensor file.
pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<(), NetError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a manifest document; tensor paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<NetworkModel, NetError> {
    let man: Manifest =
        serde_json::from_str(text).map_err(|e| NetError::Manifest(e.to_string()))?;
    let layers = man
        .layers
        .iter()
        .map(|ml| {
            Ok(Layer {
                name: ml.name.clone(),
                spec: parse_layer(ml)?,
            })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    let input = (man.input[0], man.input[1], man.input[2]);
    let mut model = NetworkModel::new(input, layers)?;
    if let Some(s) = man.input_scale {
        if !(s.is_finite() && s > 0.0) {
            return Err(NetError::Manifest(format!("input_scale {s} must be positive")));
        }
        model.input_scale = s;
    }
    if let Some(mean) = man.input_mean {
        if mean.len() != input.0 {
            return Err(NetError::Manifest(format!(
                "input_mean has {} entries for {} channels",
                mean.len(),
                input.0
            )));
        }
        model.input_mean = mean;
    }
    for (i, ml) in man.layers.iter().enumerate() {
        let spec = &model.layers[i].spec;
        let count = spec.weight_count();
        if count == 0 {
            if ml.weights_file.is_some() || ml.bias_file.is_some() {
                return Err(layer_err(&ml.name, "layer kind takes no weights"));
            }
            continue;
        }
        let Some(wf) = &ml.weights_file else {
            if ml.bias_file.is_some() {
                return Err(layer_err(&ml.name, "bias_file without weights_file"));
            }
            continue;
        };
        let weights = read_f32_file(&base.join(wf), count)
            .map_err(|e| layer_err(&ml.name, e.to_string()))?;
        let bias = match &ml.bias_file {
            Some(bf) => Some(
                read_f32_file(&base.join(bf), spec.out_features().unwrap())
                    .map_err(|e| layer_err(&ml.name, e.to_string()))?,
            ),
            None => None,
        };
        model.weights[i] = Some(LayerWeights::Real { weights, bias });
    }
    Ok(model)
}

/// Loads a JSON manifest, or a model file written by [`NetworkModel::save`].
pub fn load_network(path: &Path) -> Result<NetworkModel, NetError> {
    let text = fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let probe: Value = serde_json::from_str(&text).map_err(|e| NetError::Manifest(e.to_string()))?;
    if probe.get("format").and_then(Value::as_str) == Some(MODEL_FORMAT) {
        let doc: ModelFile = serde_json::from_value(probe)?;
        doc.model.shapes()?;
        return Ok(doc.model);
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

// ---------------------------------------------------------------------------
// Pruning

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PruneTarget {
    /// Zero every weight with |w| < threshold.
    Threshold(f64),
    /// Zero the smallest weights until at least this fraction is zero.
    Sparsity(f64),
}

#[derive(Clone, Debug, Default)]
pub struct PrunePlan {
    pub default: Option<PruneTarget>,
    pub per_layer: HashMap<String, PruneTarget>,
}

impl PrunePlan {
    pub fn uniform(t: PruneTarget) -> Self {
        PrunePlan {
            default: Some(t),
            per_layer: HashMap::new(),
        }
    }

    fn target(&self, name: &str) -> Option<PruneTarget> {
        self.per_layer.get(name).copied().or(self.default)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub nonzero: usize,
    /// Count of conv weight tiles holding 0..=16 nonzeros; empty for FC.
    pub tile_histogram: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
}

impl SparsityReport {
    pub fn layer(&self, name: &str) -> Option<&LayerSparsity> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Magnitude threshold reaching at least `fraction` zeros.
pub fn threshold_for_sparsity(weights: &[f32], fraction: f64) -> f64 {
    let need = (fraction * weights.len() as f64).ceil() as usize;
    if need == 0 {
        return 0.0;
    }
    let mut mags: Vec<f32> = weights.iter().map(|w| w.abs()).collect();
    mags.sort_by(|a, b| a.total_cmp(b));
    let t = mags[need.min(mags.len()) - 1];
    // Smallest threshold strictly above the need-th magnitude.
    t.next_up() as f64
}

fn validate_target(layer: &str, t: PruneTarget) -> Result<(), NetError> {
    match t {
        PruneTarget::Threshold(x) if !(x >= 0.0) => {
            Err(layer_err(layer, format!("threshold {x} must be >= 0")))
        }
        PruneTarget::Sparsity(f) if !(0.0..1.0).contains(&f) => {
            Err(layer_err(layer, format!("sparsity target {f} outside [0, 1)")))
        }
        _ => Ok(()),
    }
}

/// Zeroes small-magnitude real weights per the plan.
pub fn prune_magnitude(
    m: &NetworkModel,
    plan: &PrunePlan,
) -> Result<(NetworkModel, SparsityReport), NetError> {
    let mut out = m.clone();
    for (l, w) in out.layers.iter().zip(out.weights.iter_mut()) {
        let Some(target) = plan.target(&l.name) else {
            continue;
        };
        validate_target(&l.name, target)?;
        match w {
            Some(LayerWeights::Real { weights, .. }) => {
                let threshold = match target {
                    PruneTarget::Threshold(t) => t,
                    PruneTarget::Sparsity(f) => threshold_for_sparsity(weights, f),
                };
                for v in weights.iter_mut() {
                    if (v.abs() as f64) < threshold {
                        *v = 0.0;
                    }
                }
            }
            Some(LayerWeights::Quantized { .. }) => {
                return Err(layer_err(&l.name, "prune real weights before quantizing"));
            }
            None => {}
        }
    }
    let report = sparsity_report(&out);
    Ok((out, report))
}

/// Per-layer weight counts and conv weight-tile nonzero histograms.
pub fn sparsity_report(m: &NetworkModel) -> SparsityReport {
    let mut layers = Vec::new();
    for (l, w) in m.layers.iter().zip(&m.weights) {
        let Some(w) = w else { continue };
        let total = l.spec.weight_count();
        let nonzero = w.nonzero_count();
        let mut tile_histogram = Vec::new();
        if let LayerSpec::Conv(c) = &l.spec {
            tile_histogram = vec![0; TILE_LEN + 1];
            let kk = c.kernel * c.kernel;
            for tile in 0..c.out_channels * c.in_channels {
                let nnz = match w {
                    LayerWeights::Real { weights, .. } => {
                        weights[tile * kk..(tile + 1) * kk].iter().filter(|v| **v != 0.0).count()
                    }
                    LayerWeights::Quantized { weights, .. } => weights[tile * kk..(tile + 1) * kk]
                        .iter()
                        .filter(|v| !v.is_zero())
                        .count(),
                };
                tile_histogram[nnz] += 1;
            }
        }
        layers.push(LayerSparsity {
            name: l.name.clone(),
            total,
            nonzero,
            tile_histogram,
        });
    }
    SparsityReport { layers }
}

// ---------------------------------------------------------------------------
// Quantization

/// Quantizes every real-weighted layer to sign-magnitude.
///
/// Biases are folded onto the accumulator grid: `bias * weight_scale *
/// activation_scale_in`, rounded half away from zero.
pub fn quantize_network(m: &NetworkModel) -> Result<NetworkModel, NetError> {
    let mut out = m.clone();
    let mut act_scale = out.input_scale;
    for i in 0..out.layers.len() {
        let name = out.layers[i].name.clone();
        let count = out.layers[i].spec.weight_count();
        let outs = out.layers[i].spec.out_features();
        let Some((quant, mode)) = out.layers[i].spec.quant_mut() else {
            continue;
        };
        match &out.weights[i] {
            Some(LayerWeights::Real { weights, bias }) => {
                debug_assert_eq!(weights.len(), count);
                if mode == ScaleMode::MaxAbs {
                    let max = weights.iter().fold(0f64, |acc, w| acc.max(w.abs() as f64));
                    if max == 0.0 {
                        return Err(layer_err(&name, "all-zero weights leave the scale undefined"));
                    }
                    quant.weight_scale = 127.0 / max;
                }
                let ws = quant.weight_scale;
                let qw = weights
                    .iter()
                    .map(|&w| quantize(w as f64, ws))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|source| NetError::Quant {
                        layer: name.clone(),
                        source,
                    })?;
                let bias_scale = ws * act_scale;
                let qb = match bias {
                    Some(b) => b
                        .iter()
                        .map(|&x| {
                            let v = round_half_away(x as f64 * bias_scale);
                            if !v.is_finite() {
                                return Err(layer_err(&name, "non-finite bias"));
                            }
                            Ok(v.clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    None => vec![0; outs.unwrap()],
                };
                out.weights[i] = Some(LayerWeights::Quantized {
                    weights: qw,
                    bias: qb,
                });
            }
            Some(LayerWeights::Quantized { .. }) => {}
            None => return Err(layer_err(&name, "no weights to quantize")),
        }
        act_scale *= quant.weight_scale / (1u64 << quant.act_shift) as f64;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Image ingestion

/// Mean-subtracts, quantizes at the model's input scale, and tiles an image
/// given as channel-major planar f32 values.
pub fn ingest_planar(
    m: &NetworkModel,
    values: &[f32],
    mean: &[f32],
) -> Result<(Vec<QVal>, TiledTensor), NetError> {
    let (c, h, w) = m.input;
    if values.len() != c * h * w {
        return Err(NetError::Ingest(format!(
            "image holds {} values, network expects {}x{}x{}",
            values.len(),
            c,
            h,
            w
        )));
    }
    if mean.len() != c {
        return Err(NetError::Ingest(format!(
            "{} mean values for {} channels",
            mean.len(),
            c
        )));
    }
    let planar = values
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize((v - mean[i / (h * w)]) as f64, m.input_scale))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| NetError::Ingest(e.to_string()))?;
    let tiled = tile_tensor(&planar, c, w, h)?;
    Ok((planar, tiled))
}

/// Reads a raw f32 image file and ingests it.
pub fn ingest_image(m: &NetworkModel, path: &Path, mean: &[f32]) -> Result<TiledTensor, NetError> {
    let (c, h, w) = m.input;
    let bytes = fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() != c * h * w * 4 {
        return Err(NetError::Ingest(format!(
            "{} holds {} bytes, network input needs {}",
            path.display(),
            bytes.len(),
            c * h * w * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ingest_planar(m, &values, mean)?.1)
}

// ---------------------------------------------------------------------------
// Presets

const VGG16_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

/// VGG-16 geometry: 13 padded 3x3 convs, 5 max-pools, 3 fully connected.
pub fn vgg16() -> NetworkModel {
    let conv_quant = LayerQuant::new(1.0, 8, true).unwrap();
    let mut layers = Vec::new();
    let mut cin = 3;
    for (b, &(n, cout)) in VGG16_BLOCKS.iter().enumerate() {
        for i in 0..n {
            layers.push(Layer {
                name: format!("pad{}_{}", b + 1, i + 1),
                spec: LayerSpec::Pad { border: 1 },
            });
            layers.push(Layer {
                name: format!("conv{}_{}", b + 1, i + 1),
                spec: LayerSpec::Conv(ConvSpec {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    quant: conv_quant,
                    scale_mode: ScaleMode::MaxAbs,
                }),
            });
            cin = cout;
        }
        layers.push(Layer {
            name: format!("pool{}", b + 1),
            spec: LayerSpec::MaxPool {
                window: (2, 2),
                stride: (2, 2),
            },
        });
    }
    for (i, (fin, fout, relu)) in [(512 * 7 * 7, 4096, true), (4096, 4096, true), (4096, 1000, false)]
        .into_iter()
        .enumerate()
    {
        layers.push(Layer {
            name: format!("fc{}", i + 6),
            spec: LayerSpec::FullyConnected(FcSpec {
                in_features: fin,
                out_features: fout,
                quant: LayerQuant::new(1.0, 8, relu).unwrap(),
                scale_mode: ScaleMode::MaxAbs,
            }),
        });
    }
    NetworkModel::new((3, 224, 224), layers).expect("vgg16 geometry chains")
}

/// Renders a geometry-only manifest for `m`.
pub fn geometry_manifest(m: &NetworkModel) -> Value {
    let layers: Vec<Value> = m
        .layers
        .iter()
        .map(|l| {
            let params = match &l.spec {
                LayerSpec::Conv(c) => serde_json::json!({
                    "in_channels": c.in_channels,
                    "out_channels": c.out_channels,
                    "kernel": c.kernel,
                    "act_shift": c.quant.act_shift,
                    "relu": c.quant.apply_relu,
                }),
                LayerSpec::FullyConnected(f) => serde_json::json!({
                    "in_features": f.in_features,
                    "out_features": f.out_features,
                    "act_shift": f.quant.act_shift,
                    "relu": f.quant.apply_relu,
                }),
                LayerSpec::Pad { border } => serde_json::json!({ "border": border }),
                LayerSpec::MaxPool { window, stride } => serde_json::json!({
                    "window": [window.0, window.1],
                    "stride": [stride.0, stride.1],
                }),
                LayerSpec::Flatten => serde_json::json!({}),
            };
            serde_json::json!({ "name": l.name, "kind": l.spec.kind_name(), "params": params })
        })
        .collect();
    serde_json::json!({
        "input": [m.input.0, m.input.1, m.input.2],
        "layers": layers,
    })
}
