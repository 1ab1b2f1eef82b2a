//! Parameter and FLOP accounting over architecture descriptions.
//!
//! An [`ArchSpec`] is a small layer graph: every layer reads the previous
//! layer's output unless `from` names another one, and `add`/`concat`
//! join branches. One multiply-accumulate counts as one FLOP; activations,
//! normalization, pooling and joins are free.
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "input": {"channels": 3, "height": 32, "width": 32},
//!   "layers": [
//!     {"type": "conv", "name": "c1", "c_in": 3, "c_out": 16, "k": 3},
//!     {"type": "activation"},
//!     {"type": "global_pool"},
//!     {"type": "linear", "in_features": 16, "out_features": 10}
//!   ]
//! }
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::MicroNet;
use crate::structure::cardinality;
use crate::tensor::TensorShape;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Defaults to `k / 2`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding: Option<usize>,
        #[serde(default = "one")]
        groups: usize,
        #[serde(default)]
        bias: bool,
    },
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Pool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
        kind: PoolKind,
        k: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    GlobalPool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
    },
    Activation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
    },
    Norm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
    },
    /// Parameter-free shortcut: strided subsampling plus zero channel padding.
    Shortcut {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<String>,
        #[serde(default = "one")]
        stride: usize,
        channels: usize,
    },
    Add {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        inputs: Vec<String>,
    },
    Concat {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        inputs: Vec<String>,
    },
}

impl Layer {
    fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. }
            | Layer::Linear { name, .. }
            | Layer::Pool { name, .. }
            | Layer::GlobalPool { name, .. }
            | Layer::Activation { name, .. }
            | Layer::Norm { name, .. }
            | Layer::Shortcut { name, .. }
            | Layer::Add { name, .. }
            | Layer::Concat { name, .. } => name.as_deref(),
        }
    }

    fn from(&self) -> Option<&str> {
        match self {
            Layer::Conv { from, .. }
            | Layer::Linear { from, .. }
            | Layer::Pool { from, .. }
            | Layer::GlobalPool { from, .. }
            | Layer::Activation { from, .. }
            | Layer::Norm { from, .. }
            | Layer::Shortcut { from, .. } => from.as_deref(),
            Layer::Add { .. } | Layer::Concat { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: TensorShape,
    pub layers: Vec<Layer>,
}

/// Cost of one conv or linear layer after shape inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub weight_params: u64,
    pub bias_params: u64,
    pub flops: u64,
}

impl LayerCost {
    pub fn params(&self) -> u64 {
        self.weight_params + self.bias_params
    }
}

fn arch_err(msg: impl Into<String>) -> Error {
    Error::Arch(msg.into())
}

fn out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || size + 2 * padding < k {
        return Err(arch_err(format!("window {k} stride {stride} does not fit input {size} with padding {padding}")));
    }
    Ok((size + 2 * padding - k) / stride + 1)
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.layer_costs()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Shape inference over the layer graph; returns the costed layers in
    /// order.
    pub fn layer_costs(&self) -> Result<Vec<LayerCost>> {
        let mut shapes: Vec<TensorShape> = Vec::with_capacity(self.layers.len());
        let mut names: HashMap<&str, usize> = HashMap::new();
        let mut costs = Vec::new();
        let lookup = |names: &HashMap<&str, usize>, shapes: &[TensorShape], key: &str| -> Result<TensorShape> {
            if key == "input" {
                return Ok(self.input);
            }
            names.get(key).map(|&i| shapes[i]).ok_or_else(|| arch_err(format!("unknown layer reference '{key}'")))
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            let src = match layer.from() {
                Some(key) => lookup(&names, &shapes, key)?,
                None => shapes.last().copied().unwrap_or(self.input),
            };
            let label = layer.name().map(str::to_owned).unwrap_or_else(|| format!("layer{idx}"));
            let out = match layer {
                Layer::Conv { c_in, c_out, k, stride, padding, groups, bias, .. } => {
                    let (c_in, c_out, k, groups) = (*c_in, *c_out, *k, *groups);
                    if src.channels != c_in {
                        return Err(arch_err(format!("{label}: expects {c_in} channels, gets {}", src.channels)));
                    }
                    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || k == 0 || c_out == 0 {
                        return Err(Error::Divisibility { c_out, c_in, groups });
                    }
                    let pad = padding.unwrap_or(k / 2);
                    let (h, w) = (out_dim(src.height, k, *stride, pad)?, out_dim(src.width, k, *stride, pad)?);
                    let weight_params = (c_in * c_out * k * k / groups) as u64;
                    costs.push(LayerCost {
                        name: label.clone(),
                        kind: "conv".into(),
                        c_in,
                        c_out,
                        k,
                        groups,
                        out_h: h,
                        out_w: w,
                        weight_params,
                        bias_params: if *bias { c_out as u64 } else { 0 },
                        flops: weight_params * (h * w) as u64,
                    });
                    TensorShape::new(c_out, h, w)?
                }
                Layer::Linear { in_features, out_features, bias, .. } => {
                    if src.numel() != *in_features || *out_features == 0 {
                        return Err(arch_err(format!("{label}: expects {in_features} features, gets {}", src.numel())));
                    }
                    let weight_params = (in_features * out_features) as u64;
                    costs.push(LayerCost {
                        name: label.clone(),
                        kind: "linear".into(),
                        c_in: *in_features,
                        c_out: *out_features,
                        k: 1,
                        groups: 1,
                        out_h: 1,
                        out_w: 1,
                        weight_params,
                        bias_params: if *bias { *out_features as u64 } else { 0 },
                        flops: weight_params,
                    });
                    TensorShape::new(*out_features, 1, 1)?
                }
                Layer::Pool { k, stride, padding, .. } => TensorShape::new(
                    src.channels,
                    out_dim(src.height, *k, *stride, *padding)?,
                    out_dim(src.width, *k, *stride, *padding)?,
                )?,
                Layer::GlobalPool { .. } => TensorShape::new(src.channels, 1, 1)?,
                Layer::Activation { .. } | Layer::Norm { .. } => src,
                Layer::Shortcut { stride, channels, .. } => {
                    if *channels < src.channels {
                        return Err(arch_err(format!("{label}: shortcut cannot drop channels")));
                    }
                    TensorShape::new(*channels, out_dim(src.height, 1, *stride, 0)?, out_dim(src.width, 1, *stride, 0)?)?
                }
                Layer::Add { inputs, .. } | Layer::Concat { inputs, .. } => {
                    let srcs = inputs.iter().map(|k| lookup(&names, &shapes, k)).collect::<Result<Vec<_>>>()?;
                    let first = *srcs.first().ok_or_else(|| arch_err(format!("{label}: join without inputs")))?;
                    if srcs.iter().any(|s| (s.height, s.width) != (first.height, first.width)) {
                        return Err(arch_err(format!("{label}: spatial sizes differ")));
                    }
                    if matches!(layer, Layer::Add { .. }) {
                        if srcs.iter().any(|s| s.channels != first.channels) {
                            return Err(arch_err(format!("{label}: channel counts differ")));
                        }
                        first
                    } else {
                        TensorShape::new(srcs.iter().map(|s| s.channels).sum(), first.height, first.width)?
                    }
                }
            };
            if let Some(n) = layer.name() {
                if n == "input" || names.insert(n, idx).is_some() {
                    return Err(arch_err(format!("duplicate layer name '{n}'")));
                }
            }
            shapes.push(out);
        }
        Ok(costs)
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }
}

pub fn count_params(spec: &ArchSpec) -> Result<u64> {
    Ok(spec.layer_costs()?.iter().map(LayerCost::params).sum())
}

pub fn count_flops(spec: &ArchSpec) -> Result<u64> {
    Ok(spec.layer_costs()?.iter().map(|c| c.flops).sum())
}

/// Highest extra group level a conv admits on top of its declared groups.
pub fn conv_capacity(cost: &LayerCost) -> u32 {
    let mut g = 1;
    while (cost.c_in % (cost.groups * cardinality(g + 1)) == 0) && (cost.c_out % (cost.groups * cardinality(g + 1)) == 0) {
        g += 1;
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub level: u32,
    pub cardinality: usize,
    pub dense_params: u64,
    pub params: u64,
    pub dense_flops: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub name: String,
    pub dense_params: u64,
    pub params: u64,
    pub dense_flops: u64,
    pub flops: u64,
    /// Fraction of convolution weights removed.
    pub rate: f64,
    pub param_reduction: f64,
    pub flop_reduction: f64,
    pub layers: Vec<LayerReport>,
}

/// Dense versus grouped totals, one level per conv layer in order.
pub fn compression_report(spec: &ArchSpec, levels: &[u32]) -> Result<CompressionReport> {
    let costs = spec.layer_costs()?;
    let n_conv = costs.iter().filter(|c| c.kind == "conv").count();
    if levels.len() != n_conv {
        return Err(arch_err(format!("{} levels for {n_conv} conv layers", levels.len())));
    }
    let mut level_iter = levels.iter();
    let mut layers = Vec::with_capacity(costs.len());
    let (mut conv_dense, mut conv_kept) = (0.0, 0.0);
    for c in &costs {
        let level = if c.kind == "conv" {
            let g = *level_iter.next().expect("one level per conv");
            let capacity = conv_capacity(c);
            if g < 1 || g > capacity {
                return Err(Error::LevelOutOfRange { level: g, capacity });
            }
            g
        } else {
            1
        };
        let div = cardinality(level) as u64;
        if c.kind == "conv" {
            let p = c.weight_params as f64;
            conv_dense += p;
            conv_kept += p / div as f64;
        }
        layers.push(LayerReport {
            name: c.name.clone(),
            kind: c.kind.clone(),
            c_in: c.c_in,
            c_out: c.c_out,
            k: c.k,
            level,
            cardinality: c.groups * div as usize,
            dense_params: c.params(),
            params: c.weight_params / div + c.bias_params,
            dense_flops: c.flops,
            flops: c.flops / div,
        });
    }
    let dense_params: u64 = layers.iter().map(|l| l.dense_params).sum();
    let params: u64 = layers.iter().map(|l| l.params).sum();
    let dense_flops: u64 = layers.iter().map(|l| l.dense_flops).sum();
    let flops: u64 = layers.iter().map(|l| l.flops).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { 1.0 - a as f64 / b as f64 };
    Ok(CompressionReport {
        name: spec.name.clone(),
        dense_params,
        params,
        dense_flops,
        flops,
        rate: if conv_dense == 0.0 { 0.0 } else { 1.0 - conv_kept / conv_dense },
        param_reduction: ratio(params, dense_params),
        flop_reduction: ratio(flops, dense_flops),
        layers,
    })
}

impl CompressionReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for l in &self.layers {
            w.serialize(l)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The micronet's architecture with its current group counts.
pub fn micronet_spec(net: &MicroNet) -> ArchSpec {
    let mut layers = Vec::new();
    for (i, l) in net.convs().iter().enumerate() {
        layers.push(Layer::Conv {
            name: Some(format!("conv{i}")),
            from: None,
            c_in: l.c_in(),
            c_out: l.c_out(),
            k: l.k(),
            stride: l.stride(),
            padding: Some(l.padding()),
            groups: l.groups(),
            bias: true,
        });
        layers.push(Layer::Activation { name: None, from: None });
    }
    layers.push(Layer::GlobalPool { name: None, from: None });
    layers.push(Layer::Linear {
        name: Some("fc".into()),
        from: None,
        in_features: net.feature_dim(),
        out_features: net.n_classes(),
        bias: true,
    });
    ArchSpec { name: "micronet".into(), input: net.input_shape(), layers }
}

/// Standard backbones shipped with the crate.
pub mod zoo {
    use super::*;

    pub const BUNDLED: [&str; 6] = ["resnet50", "resnet101", "densenet201", "resnet20", "resnet56", "resnet110"];

    /// JSON text of a bundled spec.
    pub fn bundled_json(name: &str) -> Option<&'static str> {
        Some(match name {
            "resnet50" => include_str!("../data/resnet50.json"),
            "resnet101" => include_str!("../data/resnet101.json"),
            "densenet201" => include_str!("../data/densenet201.json"),
            "resnet20" => include_str!("../data/resnet20.json"),
            "resnet56" => include_str!("../data/resnet56.json"),
            "resnet110" => include_str!("../data/resnet110.json"),
            _ => return None,
        })
    }

    pub fn bundled(name: &str) -> Result<ArchSpec> {
        let text = bundled_json(name).ok_or_else(|| arch_err(format!("no bundled spec '{name}'")))?;
        ArchSpec::from_json(text)
    }

    /// Builds a bundled spec from code.
    pub fn build(name: &str) -> Option<ArchSpec> {
        Some(match name {
            "resnet50" => resnet_imagenet("resnet50", [3, 4, 6, 3]),
            "resnet101" => resnet_imagenet("resnet101", [3, 4, 23, 3]),
            "densenet201" => densenet("densenet201", [6, 12, 48, 32], 32, 64),
            "resnet20" => resnet_cifar("resnet20", 3),
            "resnet56" => resnet_cifar("resnet56", 9),
            "resnet110" => resnet_cifar("resnet110", 18),
            _ => return None,
        })
    }

    struct Builder {
        layers: Vec<Layer>,
    }

    impl Builder {
        fn conv(&mut self, name: String, from: Option<String>, c_in: usize, c_out: usize, k: usize, stride: usize) {
            self.layers.push(Layer::Conv {
                name: Some(name),
                from,
                c_in,
                c_out,
                k,
                stride,
                padding: None,
                groups: 1,
                bias: false,
            });
        }

        fn norm_relu(&mut self) {
            self.layers.push(Layer::Norm { name: None, from: None });
            self.layers.push(Layer::Activation { name: None, from: None });
        }

        fn named(&mut self, layer: Layer) {
            self.layers.push(layer);
        }
    }

    fn input(c: usize, hw: usize) -> TensorShape {
        TensorShape { channels: c, height: hw, width: hw }
    }

    /// Bottleneck ResNet at 224×224, stride on the 3×3 conv.
    pub fn resnet_imagenet(name: &str, blocks: [usize; 4]) -> ArchSpec {
        let mut b = Builder { layers: Vec::new() };
        b.conv("conv1".into(), None, 3, 64, 7, 2);
        b.norm_relu();
        b.named(Layer::Pool { name: Some("pool1".into()), from: None, kind: PoolKind::Max, k: 3, stride: 2, padding: 1 });
        let mut prev = "pool1".to_string();
        let mut c_in = 64;
        for (stage, &n) in blocks.iter().enumerate() {
            let width = 64 << stage;
            let c_out = width * 4;
            for i in 0..n {
                let p = format!("layer{}.{i}", stage + 1);
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                b.conv(format!("{p}.conv1"), Some(prev.clone()), c_in, width, 1, 1);
                b.norm_relu();
                b.conv(format!("{p}.conv2"), None, width, width, 3, stride);
                b.norm_relu();
                b.conv(format!("{p}.conv3"), None, width, c_out, 1, 1);
                b.named(Layer::Norm { name: Some(format!("{p}.bn3")), from: None });
                let shortcut = if i == 0 {
                    b.conv(format!("{p}.downsample"), Some(prev.clone()), c_in, c_out, 1, stride);
                    b.named(Layer::Norm { name: Some(format!("{p}.downsample.bn")), from: None });
                    format!("{p}.downsample.bn")
                } else {
                    prev.clone()
                };
                b.named(Layer::Add { name: Some(format!("{p}.add")), inputs: vec![format!("{p}.bn3"), shortcut] });
                b.named(Layer::Activation { name: Some(format!("{p}.out")), from: None });
                prev = format!("{p}.out");
                c_in = c_out;
            }
        }
        b.named(Layer::GlobalPool { name: None, from: None });
        b.named(Layer::Linear { name: Some("fc".into()), from: None, in_features: c_in, out_features: 1000, bias: true });
        ArchSpec { name: name.into(), input: input(3, 224), layers: b.layers }
    }

    /// DenseNet-BC with bottleneck width 4·growth and 0.5 compression.
    pub fn densenet(name: &str, blocks: [usize; 4], growth: usize, init: usize) -> ArchSpec {
        let mut b = Builder { layers: Vec::new() };
        b.conv("conv0".into(), None, 3, init, 7, 2);
        b.norm_relu();
        b.named(Layer::Pool { name: Some("pool0".into()), from: None, kind: PoolKind::Max, k: 3, stride: 2, padding: 1 });
        let mut features = "pool0".to_string();
        let mut c = init;
        for (bi, &n) in blocks.iter().enumerate() {
            for li in 0..n {
                let p = format!("block{}.layer{}", bi + 1, li + 1);
                b.named(Layer::Norm { name: None, from: Some(features.clone()) });
                b.named(Layer::Activation { name: None, from: None });
                b.conv(format!("{p}.conv1"), None, c, 4 * growth, 1, 1);
                b.norm_relu();
                b.conv(format!("{p}.conv2"), None, 4 * growth, growth, 3, 1);
                b.named(Layer::Concat { name: Some(format!("{p}.cat")), inputs: vec![features.clone(), format!("{p}.conv2")] });
                features = format!("{p}.cat");
                c += growth;
            }
            if bi + 1 < blocks.len() {
                let p = format!("transition{}", bi + 1);
                b.norm_relu();
                b.conv(format!("{p}.conv"), None, c, c / 2, 1, 1);
                b.named(Layer::Pool { name: Some(format!("{p}.pool")), from: None, kind: PoolKind::Avg, k: 2, stride: 2, padding: 0 });
                features = format!("{p}.pool");
                c /= 2;
            }
        }
        b.norm_relu();
        b.named(Layer::GlobalPool { name: None, from: None });
        b.named(Layer::Linear { name: Some("classifier".into()), from: None, in_features: c, out_features: 1000, bias: true });
        ArchSpec { name: name.into(), input: input(3, 224), layers: b.layers }
    }

    /// CIFAR ResNet with `n` basic blocks per stage and parameter-free
    /// shortcuts.
    pub fn resnet_cifar(name: &str, n: usize) -> ArchSpec {
        let mut b = Builder { layers: Vec::new() };
        b.conv("conv1".into(), None, 3, 16, 3, 1);
        b.norm_relu();
        b.named(Layer::Activation { name: Some("stem".into()), from: None });
        let mut prev = "stem".to_string();
        let mut c_in = 16;
        for stage in 0..3 {
            let c_out = 16 << stage;
            for i in 0..n {
                let p = format!("layer{}.{i}", stage + 1);
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                b.conv(format!("{p}.conv1"), Some(prev.clone()), c_in, c_out, 3, stride);
                b.norm_relu();
                b.conv(format!("{p}.conv2"), None, c_out, c_out, 3, 1);
                b.named(Layer::Norm { name: Some(format!("{p}.bn2")), from: None });
                let shortcut = if stride != 1 || c_in != c_out {
                    b.named(Layer::Shortcut { name: Some(format!("{p}.shortcut")), from: Some(prev.clone()), stride, channels: c_out });
                    format!("{p}.shortcut")
                } else {
                    prev.clone()
                };
                b.named(Layer::Add { name: Some(format!("{p}.add")), inputs: vec![format!("{p}.bn2"), shortcut] });
                b.named(Layer::Activation { name: Some(format!("{p}.out")), from: None });
                prev = format!("{p}.out");
                c_in = c_out;
            }
        }
        b.named(Layer::GlobalPool { name: None, from: None });
        b.named(Layer::Linear { name: Some("fc".into()), from: None, in_features: c_in, out_features: 10, bias: true });
        ArchSpec { name: name.into(), input: input(3, 32), layers: b.layers }
    }
}
