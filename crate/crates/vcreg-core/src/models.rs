//! Small classifiers with named internal boundaries.
//!
//! A boundary is a point in the forward pass where a regularizer (or any
//! other instrumentation) may attach: in an MLP, each post-activation hidden
//! layer (`hidden0`, `hidden1`, ...); in a convnet, each post-activation
//! block output (`block0`, ...) plus the pooled vector (`pool`). Taps see
//! every boundary in forward order and may replace the node that continues
//! down the main path.
//!
//! Parameters use He initialization: weights drawn from a normal with
//! std `sqrt(2 / fan_in)`, biases zero. Weights participate in weight decay,
//! biases do not.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fully connected widths, input first and class count last.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec { widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::InvalidParam {
                name: "widths",
                why: format!(
                    "need input, at least one hidden, and output widths, got {:?}",
                    self.widths
                ),
            });
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParam {
                name: "widths",
                why: format!("all widths must be positive, got {:?}", self.widths),
            });
        }
        if self.widths[self.widths.len() - 1] < 2 {
            return Err(Error::InvalidParam {
                name: "widths",
                why: "output width (class count) must be at least 2".into(),
            });
        }
        Ok(())
    }

    pub fn hidden_count(&self) -> usize {
        self.widths.len() - 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Convolutional blocks (each conv + relu, stride handles downsampling)
/// followed by global average pooling and a linear head.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub classes: usize,
}

impl ConvNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidParam {
                name: "blocks",
                why: "need at least one conv block".into(),
            });
        }
        if self.in_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::InvalidParam {
                name: "input",
                why: format!(
                    "input extents must be positive, got {}x{}x{}",
                    self.in_channels, self.input_height, self.input_width
                ),
            });
        }
        if self.classes < 2 {
            return Err(Error::InvalidParam {
                name: "classes",
                why: format!("need at least 2 classes, got {}", self.classes),
            });
        }
        let mut h = self.input_height;
        let mut w = self.input_width;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::InvalidParam {
                    name: "blocks",
                    why: format!("block {i} extents must be positive"),
                });
            }
            let pad = b.kernel / 2;
            let span_h = h + 2 * pad;
            let span_w = w + 2 * pad;
            if span_h < b.kernel || span_w < b.kernel {
                return Err(Error::InvalidParam {
                    name: "blocks",
                    why: format!("block {i} kernel {} exceeds padded input {span_h}x{span_w}", b.kernel),
                });
            }
            h = (span_h - b.kernel) / b.stride + 1;
            w = (span_w - b.kernel) / b.stride + 1;
            if h == 0 || w == 0 {
                return Err(Error::InvalidParam {
                    name: "blocks",
                    why: format!("block {i} collapses the spatial extent"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct ConvNet {
    spec: ConvNetSpec,
    pub blocks: Vec<ConvLayer>,
    pub head: Linear,
}

/// Build an MLP with He-initialized weights and zero biases.
pub fn build_mlp(spec: &MlpSpec, rng: &mut Rng) -> Result<Mlp> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.widths.len() - 1);
    for pair in spec.widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = fmath::sqrt(2.0 / fan_in as f64);
        layers.push(Linear {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng),
            bias: Tensor::zeros(&[fan_out]),
        });
    }
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

/// Build a convnet with He-initialized kernels and zero biases.
pub fn build_convnet(spec: &ConvNetSpec, rng: &mut Rng) -> Result<ConvNet> {
    spec.validate()?;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    let mut ci = spec.in_channels;
    for b in &spec.blocks {
        let fan_in = ci * b.kernel * b.kernel;
        let std = fmath::sqrt(2.0 / fan_in as f64);
        blocks.push(ConvLayer {
            weight: Tensor::randn(&[b.channels, ci, b.kernel, b.kernel], std, rng),
            bias: Tensor::zeros(&[b.channels]),
            stride: b.stride,
            pad: b.kernel / 2,
        });
        ci = b.channels;
    }
    let std = fmath::sqrt(2.0 / ci as f64);
    let head = Linear {
        weight: Tensor::randn(&[ci, spec.classes], std, rng),
        bias: Tensor::zeros(&[spec.classes]),
    };
    Ok(ConvNet {
        spec: spec.clone(),
        blocks,
        head,
    })
}

/// What kind of activation a boundary exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Vector { dim: usize },
    Spatial { channels: usize },
}

#[derive(Clone, Debug)]
pub struct BoundaryMeta {
    pub name: String,
    pub kind: BoundaryKind,
    /// True for the per-block outputs placements like `every_block` select.
    pub is_block: bool,
    /// True where the spatial extent shrinks (strided blocks).
    pub is_downsample: bool,
    /// True for the single boundary feeding the classifier head.
    pub is_penultimate: bool,
}

/// Forward-pass instrumentation. `visit` sees each boundary in forward
/// order and returns the node that continues down the main path (usually
/// the one it was given).
pub trait BoundaryTap {
    fn visit(&mut self, g: &mut Graph, meta: &BoundaryMeta, node: NodeId) -> Result<NodeId>;
}

/// Tap that does nothing.
pub struct NoTap;

impl BoundaryTap for NoTap {
    fn visit(&mut self, _g: &mut Graph, _meta: &BoundaryMeta, node: NodeId) -> Result<NodeId> {
        Ok(node)
    }
}

struct RecordTap {
    features: Vec<(String, Tensor)>,
}

impl BoundaryTap for RecordTap {
    fn visit(&mut self, g: &mut Graph, meta: &BoundaryMeta, node: NodeId) -> Result<NodeId> {
        self.features.push((meta.name.clone(), g.value(node).clone()));
        Ok(node)
    }
}

/// Parameter leaves for one graph, in [`Model::params`] order.
pub struct ModelBinding {
    ids: Vec<NodeId>,
}

impl ModelBinding {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// A parameter's name, current value, and whether weight decay applies.
pub struct ParamInfo<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub weight_decay: bool,
}

#[derive(Clone, Debug)]
pub enum Model {
    Mlp(Mlp),
    ConvNet(ConvNet),
}

impl Model {
    pub fn describe(&self) -> String {
        match self {
            Model::Mlp(m) => format!("mlp {:?}", m.spec.widths),
            Model::ConvNet(c) => {
                let chans: Vec<usize> = c.spec.blocks.iter().map(|b| b.channels).collect();
                format!(
                    "convnet {}x{}x{} blocks {:?} classes {}",
                    c.spec.in_channels, c.spec.input_height, c.spec.input_width, chans, c.spec.classes
                )
            }
        }
    }

    /// Input extents without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Model::Mlp(m) => vec![m.spec.widths[0]],
            Model::ConvNet(c) => vec![c.spec.in_channels, c.spec.input_height, c.spec.input_width],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Mlp(m) => m.spec.widths[m.spec.widths.len() - 1],
            Model::ConvNet(c) => c.spec.classes,
        }
    }

    pub fn mlp_spec(&self) -> Option<&MlpSpec> {
        match self {
            Model::Mlp(m) => Some(&m.spec),
            Model::ConvNet(_) => None,
        }
    }

    pub fn convnet_spec(&self) -> Option<&ConvNetSpec> {
        match self {
            Model::Mlp(_) => None,
            Model::ConvNet(c) => Some(&c.spec),
        }
    }

    pub fn boundaries(&self) -> Vec<BoundaryMeta> {
        match self {
            Model::Mlp(m) => {
                let hidden = m.spec.hidden_count();
                (0..hidden)
                    .map(|i| BoundaryMeta {
                        name: format!("hidden{i}"),
                        kind: BoundaryKind::Vector {
                            dim: m.spec.widths[i + 1],
                        },
                        is_block: true,
                        is_downsample: false,
                        is_penultimate: i == hidden - 1,
                    })
                    .collect()
            }
            Model::ConvNet(c) => {
                let mut out: Vec<BoundaryMeta> = c
                    .spec
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| BoundaryMeta {
                        name: format!("block{i}"),
                        kind: BoundaryKind::Spatial {
                            channels: b.channels,
                        },
                        is_block: true,
                        is_downsample: b.stride > 1,
                        is_penultimate: false,
                    })
                    .collect();
                out.push(BoundaryMeta {
                    name: "pool".into(),
                    kind: BoundaryKind::Vector {
                        dim: c.spec.blocks[c.spec.blocks.len() - 1].channels,
                    },
                    is_block: false,
                    is_downsample: false,
                    is_penultimate: true,
                });
                out
            }
        }
    }

    /// Parameters in binding order.
    pub fn params(&self) -> Vec<ParamInfo<'_>> {
        let mut out = Vec::new();
        match self {
            Model::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push(ParamInfo {
                        name: format!("layer{i}.weight"),
                        tensor: &l.weight,
                        weight_decay: true,
                    });
                    out.push(ParamInfo {
                        name: format!("layer{i}.bias"),
                        tensor: &l.bias,
                        weight_decay: false,
                    });
                }
            }
            Model::ConvNet(c) => {
                for (i, b) in c.blocks.iter().enumerate() {
                    out.push(ParamInfo {
                        name: format!("block{i}.weight"),
                        tensor: &b.weight,
                        weight_decay: true,
                    });
                    out.push(ParamInfo {
                        name: format!("block{i}.bias"),
                        tensor: &b.bias,
                        weight_decay: false,
                    });
                }
                out.push(ParamInfo {
                    name: "head.weight".into(),
                    tensor: &c.head.weight,
                    weight_decay: true,
                });
                out.push(ParamInfo {
                    name: "head.bias".into(),
                    tensor: &c.head.bias,
                    weight_decay: false,
                });
            }
        }
        out
    }

    /// Mutable parameter tensors, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match self {
            Model::Mlp(m) => {
                for l in &mut m.layers {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
            Model::ConvNet(c) => {
                for b in &mut c.blocks {
                    out.push(&mut b.weight);
                    out.push(&mut b.bias);
                }
                out.push(&mut c.head.weight);
                out.push(&mut c.head.bias);
            }
        }
        out
    }

    /// Push every parameter as a leaf of `g`, in [`Model::params`] order.
    pub fn bind(&self, g: &mut Graph) -> Result<ModelBinding> {
        let mut ids = Vec::new();
        for p in self.params() {
            ids.push(g.param(p.tensor.clone())?);
        }
        Ok(ModelBinding { ids })
    }

    pub fn forward(&self, g: &mut Graph, binding: &ModelBinding, x: &Tensor) -> Result<NodeId> {
        self.forward_tapped(g, binding, x, &mut NoTap)
    }

    /// Forward pass visiting every boundary through `tap`.
    pub fn forward_tapped(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        x: &Tensor,
        tap: &mut dyn BoundaryTap,
    ) -> Result<NodeId> {
        let metas = self.boundaries();
        match self {
            Model::Mlp(m) => {
                let (_, d) = x.dims2()?;
                if d != m.spec.widths[0] {
                    return Err(Error::Shape {
                        op: "mlp forward",
                        detail: format!("input width {d} does not match spec width {}", m.spec.widths[0]),
                    });
                }
                let mut h = g.constant(x.clone())?;
                let last = m.layers.len() - 1;
                for i in 0..last {
                    let z = g.matmul(h, binding.ids[2 * i])?;
                    let zb = g.add_row(z, binding.ids[2 * i + 1])?;
                    let a = g.relu(zb)?;
                    h = tap.visit(g, &metas[i], a)?;
                }
                let z = g.matmul(h, binding.ids[2 * last])?;
                g.add_row(z, binding.ids[2 * last + 1])
            }
            Model::ConvNet(c) => {
                let (_, ci, hi, wi) = x.dims4()?;
                if ci != c.spec.in_channels || hi != c.spec.input_height || wi != c.spec.input_width
                {
                    return Err(Error::Shape {
                        op: "convnet forward",
                        detail: format!(
                            "input {ci}x{hi}x{wi} does not match spec {}x{}x{}",
                            c.spec.in_channels, c.spec.input_height, c.spec.input_width
                        ),
                    });
                }
                let mut h = g.constant(x.clone())?;
                for (i, b) in c.blocks.iter().enumerate() {
                    let z = g.conv2d(h, binding.ids[2 * i], binding.ids[2 * i + 1], b.stride, b.pad)?;
                    let a = g.relu(z)?;
                    h = tap.visit(g, &metas[i], a)?;
                }
                let pooled = g.global_avg_pool(h)?;
                let p = tap.visit(g, &metas[c.blocks.len()], pooled)?;
                let nb = c.blocks.len();
                let z = g.matmul(p, binding.ids[2 * nb])?;
                g.add_row(z, binding.ids[2 * nb + 1])
            }
        }
    }

    /// Evaluation forward returning logits and every boundary activation.
    pub fn forward_with_features(&self, x: &Tensor) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut g = Graph::eval();
        let binding = self.bind(&mut g)?;
        let mut tap = RecordTap {
            features: Vec::new(),
        };
        let logits = self.forward_tapped(&mut g, &binding, x, &mut tap)?;
        Ok((g.value(logits).clone(), tap.features))
    }

    /// Evaluation forward returning logits only.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let binding = self.bind(&mut g)?;
        let out = self.forward(&mut g, &binding, x)?;
        Ok(g.value(out).clone())
    }

    /// Features at the boundary feeding the classifier head.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, features) = self.forward_with_features(x)?;
        let name = self
            .boundaries()
            .into_iter()
            .find(|b| b.is_penultimate)
            .map(|b| b.name)
            .expect("every model has a penultimate boundary");
        features
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or(Error::Shape {
                op: "penultimate_features",
                detail: "penultimate boundary missing from recorded features".into(),
            })
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, d) = logits.dims2()?;
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vcreg::{attach_vcreg_hooks, Placement, VCRegConfig};

    fn mlp_2_32_16_2() -> Model {
        let spec = MlpSpec::new(vec![2, 32, 16, 2]).unwrap();
        let mut rng = Rng::new(42);
        Model::Mlp(build_mlp(&spec, &mut rng).unwrap())
    }

    fn small_convnet() -> Model {
        let spec = ConvNetSpec {
            in_channels: 1,
            input_height: 8,
            input_width: 8,
            blocks: vec![
                ConvBlockSpec {
                    channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                ConvBlockSpec {
                    channels: 8,
                    kernel: 3,
                    stride: 2,
                },
            ],
            classes: 3,
        };
        spec.validate().unwrap();
        let mut rng = Rng::new(42);
        Model::ConvNet(build_convnet(&spec, &mut rng).unwrap())
    }

    #[test]
    fn mlp_boundaries_are_hidden_layers() {
        let m = mlp_2_32_16_2();
        let b = m.boundaries();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].name, "hidden0");
        assert_eq!(b[0].kind, BoundaryKind::Vector { dim: 32 });
        assert!(b[0].is_block && !b[0].is_downsample && !b[0].is_penultimate);
        assert_eq!(b[1].name, "hidden1");
        assert!(b[1].is_penultimate);
    }

    #[test]
    fn convnet_boundaries_include_pool() {
        let m = small_convnet();
        let b = m.boundaries();
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].name, "block0");
        assert!(!b[0].is_downsample);
        assert_eq!(b[1].name, "block1");
        assert!(b[1].is_downsample);
        assert_eq!(b[2].name, "pool");
        assert!(b[2].is_penultimate && !b[2].is_block);
    }

    #[test]
    fn convnet_feature_shapes_follow_strides() {
        // 8x8 input: stride-1 block keeps 8x8, stride-2 block with pad 1
        // gives (8 + 2 - 3) / 2 + 1 = 4.
        let m = small_convnet();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        let (logits, feats) = m.forward_with_features(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(feats[0].1.shape(), &[2, 4, 8, 8]);
        assert_eq!(feats[1].1.shape(), &[2, 8, 4, 4]);
        assert_eq!(feats[2].1.shape(), &[2, 8]);
    }

    #[test]
    fn zero_input_logits_equal_head_bias() {
        // Hidden biases are zero, so a zero input zeroes every activation
        // and the logits reduce to the final bias row.
        let mut m = mlp_2_32_16_2();
        {
            let mut params = m.params_mut();
            let bias = params.last_mut().unwrap();
            bias.data_mut().copy_from_slice(&[0.25, -1.5]);
        }
        let logits = m.logits(&Tensor::zeros(&[3, 2])).unwrap();
        for i in 0..3 {
            assert_eq!(logits.row(i), &[0.25, -1.5]);
        }
    }

    #[test]
    fn penultimate_features_have_last_hidden_width() {
        let m = mlp_2_32_16_2();
        let x = Tensor::zeros(&[5, 2]);
        let f = m.penultimate_features(&x).unwrap();
        assert_eq!(f.shape(), &[5, 16]);
    }

    #[test]
    fn binding_matches_param_order() {
        for m in [mlp_2_32_16_2(), small_convnet()] {
            let mut g = Graph::new();
            let binding = m.bind(&mut g).unwrap();
            let params = m.params();
            assert_eq!(binding.ids().len(), params.len());
            for (id, p) in binding.ids().iter().zip(&params) {
                assert!(g.value(*id).bits_equal(p.tensor), "{} mismatch", p.name);
            }
        }
    }

    #[test]
    fn predictions_break_ties_low() {
        let logits = Tensor::new(vec![3, 3], vec![0.1, 0.9, 0.3, 2.0, 2.0, 1.0, -1.0, -2.0, -1.0])
            .unwrap();
        assert_eq!(predictions(&logits).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn he_init_std_tracks_fan_in() {
        let spec = MlpSpec::new(vec![256, 512, 2]).unwrap();
        let mut rng = Rng::new(1);
        let m = build_mlp(&spec, &mut rng).unwrap();
        let w = &m.layers[0].weight;
        let mean: f64 = w.data().iter().sum::<f64>() / w.numel() as f64;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / w.numel() as f64;
        let expected = 2.0 / 256.0;
        assert!((var - expected).abs() < 0.2 * expected, "var {var} vs {expected}");
        assert!(m.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let m = mlp_2_32_16_2();
        assert!(m.logits(&Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn spec_validation_catches_degenerate_shapes() {
        assert!(MlpSpec::new(vec![2, 3]).is_err());
        assert!(MlpSpec::new(vec![2, 0, 2]).is_err());
        assert!(MlpSpec::new(vec![2, 4, 1]).is_err());
        let bad = ConvNetSpec {
            in_channels: 1,
            input_height: 2,
            input_width: 2,
            blocks: vec![ConvBlockSpec {
                channels: 2,
                kernel: 3,
                stride: 8,
            }],
            classes: 2,
        };
        // Stride 8 on a 2x2 input still leaves one output cell, so this
        // remains valid; same-padding keeps any kernel inside the input.
        assert!(bad.validate().is_ok());
        let no_blocks = ConvNetSpec {
            blocks: vec![],
            ..bad.clone()
        };
        assert!(no_blocks.validate().is_err());
        let one_class = ConvNetSpec { classes: 1, ..bad };
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn placement_selects_expected_sites() {
        let mlp = mlp_2_32_16_2();
        let conv = small_convnet();

        let hooked = attach_vcreg_hooks(
            mlp.clone(),
            VCRegConfig {
                placement: Placement::EveryBlock,
                ..VCRegConfig::default()
            },
        )
        .unwrap();
        assert_eq!(hooked.site_names(), ["hidden0", "hidden1"]);

        let hooked = attach_vcreg_hooks(
            mlp.clone(),
            VCRegConfig {
                placement: Placement::FinalOnly,
                ..VCRegConfig::default()
            },
        )
        .unwrap();
        assert_eq!(hooked.site_names(), ["hidden1"]);

        let err = attach_vcreg_hooks(
            mlp,
            VCRegConfig {
                placement: Placement::EveryDownsample,
                ..VCRegConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::PlacementUnavailable { placement: "every_downsample", .. }));

        let hooked = attach_vcreg_hooks(
            conv.clone(),
            VCRegConfig {
                placement: Placement::EveryDownsample,
                ..VCRegConfig::default()
            },
        )
        .unwrap();
        assert_eq!(hooked.site_names(), ["block1"]);

        let hooked = attach_vcreg_hooks(
            conv.clone(),
            VCRegConfig {
                placement: Placement::BlocksAndDownsamples,
                ..VCRegConfig::default()
            },
        )
        .unwrap();
        assert_eq!(hooked.site_names(), ["block0", "block1"]);

        let hooked = attach_vcreg_hooks(
            conv,
            VCRegConfig {
                placement: Placement::FinalOnly,
                ..VCRegConfig::default()
            },
        )
        .unwrap();
        assert_eq!(hooked.site_names(), ["pool"]);
    }
}
